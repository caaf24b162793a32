"""
A miniature ablation matrix with paired t-tests
===============================================

Four loss configurations times two seeds on a tiny dataset, then the
report files. ``crvae ablate`` runs the same thing at desk scale.
"""

import tempfile
from pathlib import Path

from crvae import config as cfgmod
from crvae import evalstat as E
from crvae.scenegen import DataConfig, generate_dataset

work = Path(tempfile.mkdtemp())
generate_dataset(work / "data", DataConfig(n_train=8, n_val=4, n_test=4), seed=1)
base = cfgmod.resolve({"epochs": "3", "batch_size": "4", "latent_dim": "8"})
report = E.run_ablation(work / "data", work / "abl", base, E.default_matrix((1, 2)))
E.emit_report(report, work / "abl" / "report")
print((work / "abl" / "report" / "summary.csv").read_text())

# the t-test on its own: three paired differences 1, 2, 3
r = E.paired_t_test([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
print(f"t = {r.t:.4f}, df = {r.df}, two-sided p = {r.p:.4f}")
print("report files in", work / "abl" / "report")
