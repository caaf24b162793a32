"""Optimization loop: Adam, cosine schedule, global-norm clipping, early stopping."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ad
from . import config as cfgmod
from .model import attach, forward, init_parameters, parameter_count, save_checkpoint
from .objective import CSV_HEADER, LossBreakdown, NonFiniteLossError, objective
from .scenegen import Dataset, augment

log = logging.getLogger(__name__)

METRICS_HEADER = CSV_HEADER + ("lr",)


def cosine_lr(t: float, total: float, lr0: float = 1e-4, lr_final: float = 1e-6) -> float:
    """Cosine annealing from ``lr0`` at ``t = 0`` to ``lr_final`` at ``t = total``."""
    if total == 0:
        raise ValueError("cosine schedule needs a positive horizon")
    if not 0 <= t <= total:
        raise ValueError(f"t={t} outside [0, {total}]")
    return lr_final + 0.5 * (lr0 - lr_final) * (1.0 + math.cos(math.pi * t / total))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0):
    """Rescale all gradients together when their joint L2 norm exceeds ``max_norm``.

    Returns ``(grads, norm_before)``. Below the threshold the input dict is
    returned untouched.
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NonFiniteLossError("gradient-norm", norm)
    if norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              cfg: cfgmod.TrainConfig = cfgmod.TrainConfig()):
    """One bias-corrected Adam update.

    Weight decay is decoupled (``p -= lr * wd * p``) unless
    ``cfg.decoupled_weight_decay`` is False, in which case ``wd * p`` is added
    to the gradient before the moment updates.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    b1, b2, eps, wd = cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay
    step = state.step + 1
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_params, m_out, v_out = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if wd and not cfg.decoupled_weight_decay:
            g = g + wd * p
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if wd and cfg.decoupled_weight_decay:
            update = update + lr * wd * p
        new_params[name] = p - update
        m_out[name], v_out[name] = m, v
    return new_params, AdamState(m_out, v_out, step)


def early_stop(history, patience: int) -> tuple[bool, int]:
    """``(stop, best_index)`` for a validation history (lower is better).

    Only strict improvements reset the counter; the run stops once more than
    ``patience`` epochs have passed since the best one.
    """
    if not len(history):
        raise ValueError("empty validation history")
    best = 0
    for i, v in enumerate(history):
        if v < history[best]:
            best = i
    return (len(history) - 1 - best) > patience, best


@dataclass
class RunRecord:
    config: cfgmod.RunConfig
    rows: list = field(default_factory=list)  # (epoch, split, LossBreakdown, lr)
    best_epoch: int = 0
    stopping_epoch: int = 0
    wall_time: float = 0.0
    test: LossBreakdown | None = None
    aborted: str | None = None
    grad_norms: list = field(default_factory=list)
    params: dict | None = None

    def split_rows(self, split: str) -> list[LossBreakdown]:
        return [b for _, s, b, _ in self.rows if s == split]

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for epoch, split, b, lr in self.rows:
            w.writerow(b.csv_row(epoch, split) + [repr(float(lr))])
        if self.test is not None:
            w.writerow(self.test.csv_row(self.best_epoch, "test") + [""])
        return buf.getvalue()

    def summary(self) -> dict:
        out = {"ablation": self.config.ablation, "seed": self.config.train.seed,
               "best_epoch": self.best_epoch, "stopping_epoch": self.stopping_epoch,
               "aborted": self.aborted or "",
               "parameters": parameter_count(self.config.model)}
        if self.test is not None:
            for k, v in self.test.as_dict().items():
                out[f"test_{k}"] = repr(float(v)) if isinstance(v, float) else v
            out["test_vae_total"] = repr(self.test.vae_total)
        return out


def batch_arrays(samples, rng=None, augment_on=False, extent=3.0):
    if augment_on:
        samples = [augment(s, rng, extent) for s in samples]
    return (np.stack([s.input_channels() for s in samples]),
            np.stack([s.gt for s in samples]))


def evaluate_params(run: cfgmod.RunConfig, params: dict, dataset: Dataset,
                    rng: np.random.Generator | None = None) -> LossBreakdown:
    """Mean per-scene :class:`LossBreakdown` over ``dataset``.

    Uses the posterior mean (no latent noise) unless the run asks for sampled
    evaluation, in which case ``rng`` supplies the noise.
    """
    if dataset.config.grid_n != run.model.grid_n:
        raise ValueError(f"dataset grid {dataset.config.grid_n} != model grid {run.model.grid_n}")
    x, gt = batch_arrays(dataset.samples)
    eps = 0.0 if run.train.eval_posterior_mean else None
    occ, curv, mu, logvar = forward(run.model, params, x, rng=rng, eps=eps)
    parts = []
    for i in range(len(dataset)):
        _, b = objective(occ[i:i + 1], curv[i:i + 1], mu[i:i + 1], logvar[i:i + 1],
                         gt[i:i + 1], run.weights)
        parts.append(b)
    return mean_breakdown(parts, [1] * len(parts))


def mean_breakdown(parts: list[LossBreakdown], weights) -> LossBreakdown:
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    keys = ("recon", "kl", "curvature", "normal", "edge", "total")
    vals = {k: float(sum(wi * getattr(b, k) for wi, b in zip(w, parts))) for k in keys}
    count = int(round(sum(wi * b.surface_voxel_count for wi, b in zip(w, parts))))
    return LossBreakdown(surface_voxel_count=count, **vals)


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def train(run: cfgmod.RunConfig, train_ds: Dataset, val_ds: Dataset,
          test_ds: Dataset | None = None, out_dir=None, check_clip: bool = False) -> RunRecord:
    """Train one model; returns a :class:`RunRecord` holding the best parameters.

    Raises :class:`NonFiniteLossError` (naming the component) if any batch
    loss or gradient norm stops being finite. With ``out_dir`` the resolved
    config, metrics CSV, run summary and best checkpoint are written there.
    """
    tc = run.train
    if train_ds.config.grid_n != run.model.grid_n:
        raise ValueError("training data resolution does not match the model")
    init_rng, order_rng, eps_rng, aug_rng = _streams(tc.seed)
    params = init_parameters(run.model, init_rng)
    state = AdamState()
    record = RunRecord(run)
    best_params, history = params, []
    horizon = max(tc.epochs - 1, 1)
    start = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfgmod.dump(run))
    try:
        for epoch in range(tc.epochs):
            lr = cosine_lr(epoch, horizon, tc.lr0, tc.lr_final)
            order = order_rng.permutation(len(train_ds))
            parts, sizes = [], []
            for lo in range(0, len(order), tc.batch_size):
                batch = [train_ds.samples[i] for i in order[lo:lo + tc.batch_size]]
                x, gt = batch_arrays(batch, aug_rng, tc.augment, train_ds.config.extent)
                tape = ad.Tape()
                p = attach(tape, params)
                occ, curv, mu, logvar = forward(run.model, p, x, rng=eps_rng)
                total, br = objective(occ, curv, mu, logvar, gt, run.weights)
                g = ad.backward(tape, total)
                grads = {k: g[t.node].data for k, t in p.items()}
                grads, norm = clip_global_norm(grads, tc.clip_norm)
                record.grad_norms.append(norm)
                if check_clip:
                    post = global_norm(grads)
                    assert post <= tc.clip_norm + 1e-12, post
                params, state = adam_step(params, grads, state, lr, tc)
                parts.append(br)
                sizes.append(len(batch))
            record.rows.append((epoch + 1, "train", mean_breakdown(parts, sizes), lr))
            val = evaluate_params(run, params, val_ds, eps_rng)
            record.rows.append((epoch + 1, "val", val, lr))
            history.append(val.total)
            stop, best = early_stop(history, tc.patience)
            if best == epoch:
                best_params = params
            record.best_epoch = best + 1
            record.stopping_epoch = epoch + 1
            log.info("epoch %d lr %.3g train %.5f val %.5f", epoch + 1, lr,
                     record.rows[-2][2].total, val.total)
            if stop:
                break
    except NonFiniteLossError as exc:
        record.aborted = exc.component
        record.wall_time = time.perf_counter() - start
        if out is not None:
            _write_outputs(record, out, None)
        raise
    record.params = best_params
    if test_ds is not None:
        record.test = evaluate_params(run, best_params, test_ds)
    record.wall_time = time.perf_counter() - start
    if out is not None:
        _write_outputs(record, out, best_params)
    return record


def checkpoint_header(run: cfgmod.RunConfig) -> dict:
    return cfgmod.to_mapping(run)


def _write_outputs(record: RunRecord, out: Path, params) -> None:
    (out / "metrics.csv").write_text(record.metrics_csv())
    (out / "run.txt").write_text("".join(f"{k} = {v}\n" for k, v in record.summary().items()))
    (out / "timing.txt").write_text(f"wall_time = {record.wall_time:.3f}\n")
    if params is not None:
        save_checkpoint(out / "checkpoint.ckpt", checkpoint_header(record.config), params)
