"""
Synthetic scenes, depth rendering and sparse observations
=========================================================

One scene end to end: primitives -> occupancy grid -> ray-marched depth
-> 5% of valid pixels -> back-projected evidence voxels.
"""

import numpy as np

from crvae import scenegen as S

cfg = S.DataConfig()
rng = S.scene_rng(seed=0, index=0)
spec = S.sample_scene_spec(rng, cfg.grid_n)
gt = S.generate_scene(spec)
print("primitives:", [type(p).__name__ for p in spec.primitives])
print("occupied voxels", int(gt.sum()), "of", gt.size)

cam = S.sample_camera(rng)
depth = S.render_depth(gt, cam)
print("valid pixels", int(depth.valid.sum()), "depth range %.2f-%.2f m"
      % (depth.depth[depth.valid].min(), depth.depth[depth.valid].max()))

obs = S.sparsify(depth, cam, 0.05, rng)
print("kept", len(obs), "samples = round(0.05 *", obs.valid_pixels, ")")

grid = S.voxelize_observation(obs, cfg.grid_n)
hit = (grid.evidence > 0) & (gt > 0)
print("evidence voxels", int(grid.evidence.sum()), "on ground truth", int(hit.sum()),
      "dropped", grid.dropped)

# augmentation: mirrored x and a 4% depth stretch
sample = S.Sample(gt, obs, grid.evidence, grid.mask)
aug = S.augment(sample, np.random.default_rng(1), flip=True, scale=1.04)
print("flip keeps occupancy:", aug.gt.sum() == gt.sum())
