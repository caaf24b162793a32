"""Test evaluation, paired t-tests over seeds, and the ablation harness.

Per-run artifacts live in ``<out>/runs/<cell>_seed<seed>/``; aggregation only
reads those files, so re-running :func:`aggregate` on the same directory
reproduces the report byte for byte.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .model import load_checkpoint
from .objective import ABLATIONS, LossBreakdown, LossWeights, NonFiniteLossError
from .scenegen import Dataset, load_split
from .trainer import METRICS_HEADER, evaluate_params, train

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (42, 123, 456)
REPORT_METRICS = ("total", "vae_total", "recon", "kl", "curvature")


# ---------------------------------------------------------------- t tests

def _betacf(a: float, b: float, x: float, max_iter: int = 300, tol: float = 1e-15) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def regularized_beta(x: float, a: float, b: float) -> float:
    """I_x(a, b) for ``a, b > 0`` and ``0 <= x <= 1``."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x={x} outside [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    # use the symmetry I_x(a,b) = 1 - I_{1-x}(b,a) where the fraction converges faster
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    return regularized_beta(df / (df + t * t), 0.5 * df, 0.5)


def t_cdf(t: float, df: float) -> float:
    half = 0.5 * t_sf_two_sided(t, df)
    return 1.0 - half if t >= 0 else half


@dataclass(frozen=True)
class StatResult:
    a: tuple
    b: tuple
    mean_diff: float
    t: float
    df: int
    p: float
    exact_separation: bool = False


def paired_t_test(a, b) -> StatResult:
    """Two-sided paired t-test on ``a - b`` with an ``n - 1`` sample sd."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    # differences equal up to rounding count as zero spread
    if sd <= 1e-12 * float(np.abs(d).max()) or sd == 0.0:
        if mean == 0.0:
            return StatResult(tuple(a), tuple(b), 0.0, 0.0, n - 1, 1.0)
        return StatResult(tuple(a), tuple(b), mean, math.copysign(math.inf, mean), n - 1, 0.0,
                          exact_separation=True)
    t = mean / (sd / math.sqrt(n))
    return StatResult(tuple(a), tuple(b), mean, t, n - 1, t_sf_two_sided(t, n - 1))


# ------------------------------------------------------------- evaluation

def run_config_from_header(header: dict) -> cfgmod.RunConfig:
    return cfgmod.resolve(header)


def evaluate(checkpoint, dataset: Dataset | str | Path, split: str = "test",
             sample_seed: int | None = None) -> LossBreakdown:
    """Mean per-scene loss breakdown of a saved model on a dataset split.

    ``total`` is the full weighted objective of the checkpoint's configuration;
    :attr:`LossBreakdown.vae_total` gives reconstruction plus KL only. Latents
    are the posterior mean unless ``sample_seed`` asks for sampled evaluation.
    """
    header, params = load_checkpoint(checkpoint)
    run = run_config_from_header(header)
    if not isinstance(dataset, Dataset):
        dataset = load_split(dataset, split)
    if dataset.config.grid_n != run.model.grid_n:
        raise ValueError(f"checkpoint grid {run.model.grid_n} does not match dataset "
                         f"grid {dataset.config.grid_n}")
    rng = None
    if sample_seed is not None:
        run = replace(run, train=replace(run.train, eval_posterior_mean=False))
        rng = np.random.default_rng(sample_seed)
    return evaluate_params(run, params, dataset, rng)


# --------------------------------------------------------------- ablation

@dataclass(frozen=True)
class AblationCell:
    name: str
    seeds: tuple = DEFAULT_SEEDS

    def __post_init__(self):
        if self.name not in ABLATIONS:
            raise ValueError(f"unknown ablation cell {self.name!r}")


def default_matrix(seeds=DEFAULT_SEEDS) -> list[AblationCell]:
    return [AblationCell(name, tuple(seeds)) for name in ABLATIONS]


def run_dir(out, cell: str, seed: int) -> Path:
    return Path(out) / "runs" / f"{cell}_seed{seed}"


def _job(args):
    data_root, base_map, cell, seed, out = args
    run = cfgmod.resolve({**base_map, "ablation": cell, "seed": str(seed)})
    train_ds, val_ds, test_ds = (load_split(data_root, s) for s in ("train", "val", "test"))
    target = run_dir(out, cell, seed)
    try:
        train(run, train_ds, val_ds, test_ds, out_dir=target)
    except NonFiniteLossError as exc:
        log.warning("%s seed %d aborted: %s", cell, seed, exc)
        return cell, seed, exc.component
    return cell, seed, None


def run_ablation(data_root, out_dir, base: cfgmod.RunConfig | None = None,
                 matrix: list[AblationCell] | None = None, jobs: int = 1) -> "AblationReport":
    """Train every (cell, seed) pair, then aggregate what landed on disk.

    Runs that stop on a non-finite loss are recorded as instability events.
    """
    base = base or cfgmod.RunConfig()
    matrix = matrix or default_matrix()
    # loss weights always come from each cell's preset
    skip = {f.name for f in fields(LossWeights)} | {"ablation", "seed"}
    base_map = {k: v for k, v in cfgmod.to_mapping(base).items() if k not in skip}
    tasks = [(str(data_root), base_map, c.name, s, str(out_dir)) for c in matrix for s in c.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_job, tasks))
    else:
        for t in tasks:
            _job(t)
    return aggregate(out_dir, matrix)


@dataclass
class RunSummary:
    cell: str
    seed: int
    test: dict | None
    aborted: str
    curves: list  # (epoch, split, {metric: value})
    best_epoch: int = 0


def _read_kv(path: Path) -> dict:
    out = {}
    for line in path.read_text().splitlines():
        k, _, v = line.partition(" = ")
        out[k] = v
    return out


def load_run(path: Path, cell: str, seed: int) -> RunSummary:
    summary = _read_kv(path / "run.txt")
    rows = list(csv.DictReader(io.StringIO((path / "metrics.csv").read_text())))
    curves, test = [], None
    for r in rows:
        vals = {k: float(r[k]) for k in ("recon", "kl", "curvature", "normal", "edge", "total")}
        vals["surface_voxels"] = int(r["surface_voxels"])
        if r["split"] == "test":
            vals["vae_total"] = float(summary["test_vae_total"])
            test = vals
        else:
            curves.append((int(r["epoch"]), r["split"], vals))
    return RunSummary(cell, seed, test, summary.get("aborted", ""), curves,
                      int(summary.get("best_epoch", 0)))


@dataclass
class AblationReport:
    runs: list
    cells: dict = field(default_factory=dict)  # cell -> metric -> (mean, sd, n)
    ttest: StatResult | None = None
    ttest_metric: str = "recon"

    def cell_values(self, cell: str, metric: str) -> list[float]:
        return [r.test[metric] for r in self.runs if r.cell == cell and r.test is not None]

    def aborted(self, cell: str) -> list[int]:
        return [r.seed for r in self.runs if r.cell == cell and r.aborted]


def _mean_sd(vals):
    n = len(vals)
    if n == 0:
        return math.nan, math.nan, 0
    mean = float(np.mean(vals))
    sd = float(np.std(vals, ddof=1)) if n > 1 else math.nan
    return mean, sd, n


def aggregate(out_dir, matrix: list[AblationCell] | None = None) -> AblationReport:
    """Rebuild the ablation report from per-run files under ``out_dir/runs``."""
    matrix = matrix or _discover(out_dir)
    runs = []
    for c in matrix:
        for s in c.seeds:
            d = run_dir(out_dir, c.name, s)
            if (d / "run.txt").exists():
                runs.append(load_run(d, c.name, s))
    report = AblationReport(runs)
    for c in matrix:
        report.cells[c.name] = {m: _mean_sd(report.cell_values(c.name, m)) for m in REPORT_METRICS}
    base = {r.seed: r.test for r in runs if r.cell == "baseline" and r.test}
    curv = {r.seed: r.test for r in runs if r.cell == "curvature-only" and r.test}
    shared = sorted(set(base) & set(curv))
    if len(shared) >= 2:
        report.ttest = paired_t_test([curv[s]["recon"] for s in shared],
                                     [base[s]["recon"] for s in shared])
    return report


def _discover(out_dir) -> list[AblationCell]:
    found: dict[str, list[int]] = {}
    for d in sorted((Path(out_dir) / "runs").iterdir()):
        cell, _, seed = d.name.rpartition("_seed")
        found.setdefault(cell, []).append(int(seed))
    return [AblationCell(c, tuple(sorted(found[c]))) for c in ABLATIONS if c in found]


# ----------------------------------------------------------------- report

def _fmt(x) -> str:
    if isinstance(x, float) and math.isnan(x):
        return ""
    return repr(float(x)) if isinstance(x, float) else str(x)


def summary_csv(report: AblationReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell", "metric", "mean", "sd", "n", "aborted", "t", "p"])
    for cell, metrics in report.cells.items():
        for m, (mean, sd, n) in metrics.items():
            t = p = ""
            if report.ttest is not None and cell == "curvature-only" and m == report.ttest_metric:
                t, p = _fmt(float(report.ttest.t)), _fmt(float(report.ttest.p))
            w.writerow([cell, m, _fmt(mean), _fmt(sd), n, len(report.aborted(cell)), t, p])
    return buf.getvalue()


def ttest_csv(report: AblationReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["comparison", "metric", "n", "mean_diff", "t", "df", "p", "exact_separation"])
    r = report.ttest
    if r is not None:
        w.writerow(["curvature-only - baseline", report.ttest_metric, len(r.a),
                    _fmt(r.mean_diff), _fmt(float(r.t)), r.df, _fmt(r.p),
                    str(r.exact_separation).lower()])
    return buf.getvalue()


def curves_csv(report: AblationReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ("recon", "kl", "curvature", "normal", "edge", "total")
    w.writerow(["cell", "seed", "epoch", "split", *cols])
    for r in report.runs:
        for epoch, split, vals in r.curves:
            w.writerow([r.cell, r.seed, epoch, split, *(_fmt(vals[c]) for c in cols)])
    return buf.getvalue()


def _plot(path: Path, series: dict, title: str, ylabel: str, log_y: bool = False) -> dict:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "crvae"
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (x, y) in series.items():
        ax.plot(x, y, label=label, linewidth=1.2)
    if log_y:
        ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    limits = {"x": ax.get_xlim(), "y": ax.get_ylim()}
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return limits


def emit_report(report: AblationReport, out_dir) -> dict:
    """Write summary, t-test and curve CSVs plus SVG line plots; returns plot limits."""
    if not report.runs:
        raise ValueError("no run records to report")
    for r in report.runs:
        if not r.curves:
            raise ValueError(f"run {r.cell} seed {r.seed} has an empty curve")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.csv").write_text(summary_csv(report))
    (out / "ttest.csv").write_text(ttest_csv(report))
    (out / "curves.csv").write_text(curves_csv(report))

    totals = {}
    for r in report.runs:
        for split in ("train", "val"):
            pts = [(e, v["total"]) for e, s, v in r.curves if s == split]
            totals[f"{r.cell} s{r.seed} {split}"] = tuple(zip(*pts))
    limits = {"totals": _plot(out / "loss_totals.svg", totals, "training and validation loss",
                              "total loss", log_y=True)}
    comps = {}
    focus = [r for r in report.runs if r.cell == "curvature-only"] or report.runs[:1]
    r = focus[0]
    for metric in ("recon", "kl", "curvature"):
        pts = [(e, v[metric]) for e, s, v in r.curves if s == "train" and v[metric] > 0]
        if pts:
            comps[metric] = tuple(zip(*pts))
    limits["components"] = _plot(out / "loss_components.svg", comps,
                                 f"loss components ({r.cell}, seed {r.seed})", "value",
                                 log_y=True)
    limits["series"] = {"totals": totals, "components": comps}
    return limits
