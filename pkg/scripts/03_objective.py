"""
The weighted objective and its ablation presets
===============================================

recon + beta * KL + lambda_c * curvature (+ normal and edge terms for the
multi-geometric cell), evaluated for random predictions.
"""

import numpy as np

from crvae.objective import ABLATIONS, ablation_weights, objective, total_loss

rng = np.random.default_rng(0)
occ = rng.uniform(0.1, 0.9, size=(2, 8, 8, 8))
curv = rng.normal(scale=0.05, size=occ.shape)
mu, logvar = rng.normal(size=(2, 4)), rng.normal(scale=0.2, size=(2, 4))
gt = (rng.random(occ.shape) < 0.4).astype(float)

for name in ABLATIONS:
    _, br = objective(occ, curv, mu, logvar, gt, ablation_weights(name))
    print(f"{name:22s} recon {br.recon:.4f} kl {br.kl:.3f} curv {br.curvature:.5f} "
          f"normal {br.normal:.4f} edge {br.edge:.4f} total {br.total:.5f}")

# the headline arithmetic with default weights
print("0.5 + 0.001*0.4 + 0.02*0.02 =", total_loss({"recon": 0.5, "kl": 0.4, "curvature": 0.02}).total)
