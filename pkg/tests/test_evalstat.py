import csv
import io
import math

import numpy as np
import pytest
from scipy import stats

from crvae import config as cfgmod
from crvae import evalstat as E
from crvae import model as M
from crvae.scenegen import DataConfig, generate_dataset, load_split
from oracles import bce_loop, regularized_beta_mp, t_two_sided_p_quad


def test_t_test_one_two_three():
    r = E.paired_t_test([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
    assert abs(r.t - 3.4641) <= 1e-3
    assert r.df == 2 and r.mean_diff == 2.0
    assert 0.05 < r.p < 0.10
    assert r.p == pytest.approx(0.0742, abs=5e-5)
    assert abs(r.p - t_two_sided_p_quad(r.t, 2)) <= 1e-12


def test_t_test_degenerate_cases():
    same = E.paired_t_test([0.2, 0.5, 0.9], [0.2, 0.5, 0.9])
    assert same.p == 1.0 and same.t == 0.0 and not same.exact_separation
    shifted = E.paired_t_test([1.2, 1.5, 1.9], [0.2, 0.5, 0.9])
    assert shifted.p == 0.0 and shifted.exact_separation and shifted.t > 0
    with pytest.raises(ValueError):
        E.paired_t_test([1.0], [2.0])
    with pytest.raises(ValueError):
        E.paired_t_test([1.0, 2.0], [2.0])


def test_t_test_symmetries():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=5), rng.normal(size=5)
    r = E.paired_t_test(a, b)
    neg = E.paired_t_test(-a, -b)
    assert neg.t == pytest.approx(-r.t, rel=1e-12) and neg.p == pytest.approx(r.p, rel=1e-12)
    moved = E.paired_t_test(a + 7.5, b + 7.5)
    assert moved.t == pytest.approx(r.t, rel=1e-9)
    assert math.copysign(1, r.t) == math.copysign(1, r.mean_diff)


def test_t_test_matches_scipy():
    rng = np.random.default_rng(1)
    for n in (2, 3, 5, 12):
        a, b = rng.normal(size=n), rng.normal(size=n)
        want = stats.ttest_rel(a, b)
        got = E.paired_t_test(a, b)
        assert got.t == pytest.approx(want.statistic, rel=1e-10)
        assert got.p == pytest.approx(want.pvalue, rel=1e-9, abs=1e-14)


def test_p_monotone_in_abs_t():
    for df in (1, 2, 5, 30):
        ps = [E.t_sf_two_sided(t, df) for t in np.linspace(0, 40, 401)]
        assert ps[0] == pytest.approx(1.0, abs=1e-15)
        assert all(x >= y for x, y in zip(ps, ps[1:]))
        assert all(0.0 <= p <= 1.0 for p in ps)


def test_tabulated_critical_value():
    assert E.t_sf_two_sided(4.303, 2) == pytest.approx(0.05, abs=5e-5)
    assert E.t_cdf(4.303, 2) == pytest.approx(0.975, abs=3e-5)


def test_regularized_beta_against_mpmath():
    for a, b in ((0.5, 0.5), (1.0, 0.5), (2.5, 0.5), (15.0, 0.5), (3.0, 7.0)):
        for x in (0.001, 0.1, 0.37, 0.5, 0.8, 0.999):
            assert abs(E.regularized_beta(x, a, b) - regularized_beta_mp(x, a, b)) <= 1e-12
    assert E.regularized_beta(0.0, 2, 3) == 0.0 and E.regularized_beta(1.0, 2, 3) == 1.0


# ------------------------------------------------------------- evaluation

SMALL_MODEL = {"latent_dim": "4", "encoder_widths": "16", "decoder_widths": "16"}


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("evaldata")
    generate_dataset(root, DataConfig(n_train=4, n_val=2, n_test=3), seed=11)
    return root


def _checkpoint(path, zero_heads=False):
    run = cfgmod.resolve(SMALL_MODEL)
    params = M.init_parameters(run.model, np.random.default_rng(0))
    if zero_heads:
        for k in params:
            if k.startswith("head_"):
                params[k] = np.zeros_like(params[k])
    M.save_checkpoint(path, cfgmod.to_mapping(run), params)
    return run, params


def test_evaluate_is_deterministic(data_root, tmp_path):
    _checkpoint(tmp_path / "m.ckpt")
    a = E.evaluate(tmp_path / "m.ckpt", data_root)
    b = E.evaluate(tmp_path / "m.ckpt", data_root)
    assert a.csv_row(0, "test") == b.csv_row(0, "test")
    assert a.vae_total == pytest.approx(a.recon + 0.001 * a.kl, abs=1e-15)


def test_zero_heads_give_ln2(data_root, tmp_path):
    _checkpoint(tmp_path / "z.ckpt", zero_heads=True)
    assert E.evaluate(tmp_path / "z.ckpt", data_root).recon == pytest.approx(math.log(2), abs=1e-12)


def test_evaluate_recon_matches_per_scene_oracle(data_root, tmp_path):
    run, params = _checkpoint(tmp_path / "m.ckpt")
    ds = load_split(data_root, "test")
    occ, _, _, _ = M.forward(run.model, params, ds.inputs(), eps=0.0)
    want = np.mean([bce_loop(occ.data[i], ds.samples[i].gt) for i in range(len(ds))])
    assert abs(E.evaluate(tmp_path / "m.ckpt", ds).recon - want) <= 1e-12


def test_sampled_evaluation_differs(data_root, tmp_path):
    _checkpoint(tmp_path / "m.ckpt")
    mean = E.evaluate(tmp_path / "m.ckpt", data_root)
    s1 = E.evaluate(tmp_path / "m.ckpt", data_root, sample_seed=1)
    s2 = E.evaluate(tmp_path / "m.ckpt", data_root, sample_seed=1)
    assert s1.recon != mean.recon and s1.recon == s2.recon


def test_evaluate_rejects_grid_mismatch(data_root, tmp_path):
    run = cfgmod.resolve({**SMALL_MODEL, "grid_n": "8"})
    M.save_checkpoint(tmp_path / "g.ckpt", cfgmod.to_mapping(run),
                      M.init_parameters(run.model, np.random.default_rng(0)))
    with pytest.raises(ValueError, match="grid"):
        E.evaluate(tmp_path / "g.ckpt", data_root)


# --------------------------------------------------------------- ablation

@pytest.fixture(scope="module")
def ablation(data_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("abl")
    base = cfgmod.resolve({**SMALL_MODEL, "epochs": "2", "batch_size": "2"})
    report = E.run_ablation(data_root, out, base, E.default_matrix((1, 2)), jobs=1)
    return out, report


def test_ablation_bookkeeping(ablation):
    out, report = ablation
    assert len(report.runs) == 8
    assert set(report.cells) == {"baseline", "curvature-only", "multi-geometric",
                                 "alternative-geometric"}
    for r in report.runs:
        cfg = (out / "runs" / f"{r.cell}_seed{r.seed}" / "config.txt").read_text()
        assert f"ablation = {r.cell}\n" in cfg and f"seed = {r.seed}\n" in cfg
    multi = (out / "runs" / "multi-geometric_seed1" / "config.txt").read_text()
    assert "lambda_normal = 0.05\n" in multi and "lambda_edge = 0.01\n" in multi
    alt = (out / "runs" / "alternative-geometric_seed1" / "config.txt").read_text()
    assert "curvature_operator = gradient-normal-alternative\n" in alt


def test_cell_stats_match_csv_recomputation(ablation):
    out, report = ablation
    for cell, metrics in report.cells.items():
        vals = []
        for seed in (1, 2):
            text = (out / "runs" / f"{cell}_seed{seed}" / "metrics.csv").read_text()
            test_row = [r for r in csv.DictReader(io.StringIO(text)) if r["split"] == "test"][0]
            vals.append(float(test_row["recon"]))
        mean, sd, n = metrics["recon"]
        assert n == 2
        assert mean == pytest.approx(np.mean(vals), abs=1e-15)
        assert sd == pytest.approx(np.std(vals, ddof=1), abs=1e-15)


def test_t_test_pairs_by_seed(ablation):
    _, report = ablation
    r = report.ttest
    assert r is not None and r.df == 1
    assert r.a == tuple(report.cell_values("curvature-only", "recon"))
    assert r.b == tuple(report.cell_values("baseline", "recon"))


def test_report_files_and_reaggregation(ablation, tmp_path):
    out, report = ablation
    E.emit_report(report, tmp_path / "r1")
    E.emit_report(E.aggregate(out), tmp_path / "r2")
    for name in ("summary.csv", "ttest.csv", "curves.csv", "loss_totals.svg",
                 "loss_components.svg"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()
    rows = list(csv.DictReader(io.StringIO((tmp_path / "r1" / "summary.csv").read_text())))
    assert {r["cell"] for r in rows} == set(report.cells)
    assert sum(1 for r in rows if r["t"]) == 1
    assert len((tmp_path / "r1" / "ttest.csv").read_text().splitlines()) == 2
    assert b"<svg" in (tmp_path / "r1" / "loss_totals.svg").read_bytes()


def test_plot_ranges_contain_data(ablation, tmp_path):
    _, report = ablation
    limits = E.emit_report(report, tmp_path)
    for plot in ("totals", "components"):
        (x0, x1), (y0, y1) = limits[plot]["x"], limits[plot]["y"]
        for xs, ys in limits["series"][plot].values():
            assert x0 <= min(xs) and max(xs) <= x1
            assert y0 <= min(ys) and max(ys) <= y1


def test_single_run_report(ablation, tmp_path):
    out, _ = ablation
    report = E.aggregate(out, [E.AblationCell("baseline", (1,))])
    E.emit_report(report, tmp_path)
    rows = list(csv.DictReader(io.StringIO((tmp_path / "summary.csv").read_text())))
    assert all(r["sd"] == "" and r["n"] == "1" and r["t"] == "" for r in rows)
    assert len((tmp_path / "ttest.csv").read_text().splitlines()) == 1


def test_empty_curve_rejected(ablation, tmp_path):
    _, report = ablation
    broken = E.AblationReport([E.RunSummary("baseline", 1, None, "", [])])
    with pytest.raises(ValueError):
        E.emit_report(broken, tmp_path)
    with pytest.raises(ValueError):
        E.emit_report(E.AblationReport([]), tmp_path)


def test_parallel_jobs_match_serial(ablation, data_root, tmp_path):
    out, report = ablation
    base = cfgmod.resolve({**SMALL_MODEL, "epochs": "2", "batch_size": "2"})
    par = E.run_ablation(data_root, tmp_path, base, E.default_matrix((1, 2)), jobs=2)
    assert E.summary_csv(par) == E.summary_csv(report)
