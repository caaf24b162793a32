"""
Training one small model
========================

A few epochs on a handful of scenes. The desk defaults (200 scenes,
50 epochs) take about a minute per run; this is the seconds-long version.
"""

import tempfile
from pathlib import Path

from crvae import config as cfgmod
from crvae.evalstat import evaluate
from crvae.scenegen import DataConfig, generate_dataset, load_split
from crvae.trainer import train

work = Path(tempfile.mkdtemp())
generate_dataset(work / "data", DataConfig(n_train=16, n_val=4, n_test=4), seed=3)
splits = [load_split(work / "data", s) for s in ("train", "val", "test")]

run = cfgmod.resolve({"ablation": "curvature-only", "epochs": "5", "batch_size": "8",
                      "lr0": "1e-3", "lr_final": "1e-5"})
record = train(run, *splits, out_dir=work / "run")
for epoch, split, br, lr in record.rows:
    if split == "train":
        print(f"epoch {epoch} lr {lr:.2e} recon {br.recon:.4f} kl {br.kl:.2f} curv {br.curvature:.5f}")
print("best epoch", record.best_epoch)

# reload the checkpoint and score it with the posterior mean
br = evaluate(work / "run" / "checkpoint.ckpt", work / "data")
print("test recon %.4f  recon+beta*kl %.4f  full total %.4f" % (br.recon, br.vae_total, br.total))
print("outputs in", work)
