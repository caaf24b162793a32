"""
Discrete Laplacian and the surface band
=======================================

A blurred sphere has a soft shell where occupancy sits between 0.3 and
0.7. The Laplacian is strongest there, and the curvature loss only looks
at those voxels.
"""

import numpy as np

from crvae.voxgeo import gradient_magnitude, laplacian, surface_mask

n = 16
c = (np.arange(n) + 0.5) / n
X, Y, Z = np.meshgrid(c, c, c, indexing="ij")
r = np.sqrt((X - 0.5) ** 2 + (Y - 0.5) ** 2 + (Z - 0.5) ** 2)
occ = 1.0 / (1.0 + np.exp((r - 0.3) * 40))  # soft ball of radius 0.3

band = surface_mask(occ)
h6, h26 = laplacian(occ, 6), laplacian(occ, 26)
print("band voxels", band.sum(), "of", occ.size)
print("mean |H6| in band %.4f, off band %.4f" % (np.abs(h6[band]).mean(), np.abs(h6[~band]).mean()))
print("6 vs 26 neighbours, max diff %.4f" % np.abs(h6 - h26).max())
print("gradient magnitude peak %.3f" % gradient_magnitude(occ).max())

# a flat grid has no curvature anywhere
print("constant grid ->", np.unique(laplacian(np.full((n, n, n), 0.42))))
