import csv
import io
import math
import subprocess
import sys

import pytest

from crvae import cli
from crvae.objective import NonFiniteLossError
from test_scenegen import dir_digest

SMALL = """# tiny end-to-end configuration
n_train = 4
n_val = 2
n_test = 2
latent_dim = 4
encoder_widths = 16
decoder_widths = 16
epochs = 1
batch_size = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.cfg").write_text(SMALL)
    assert cli.main(["gen-data", "--config", str(root / "small.cfg"), "--out",
                     str(root / "data"), "--seed", "9"]) == 0
    return root


def test_gen_data_counts_and_snapshot(workspace, capsys):
    assert cli.main(["gen-data", "--config", str(workspace / "small.cfg"), "--out",
                     str(workspace / "again"), "--seed", "9"]) == 0
    out = capsys.readouterr().out
    assert "train: 4 scenes" in out and "val: 2 scenes" in out and "test: 2 scenes" in out
    assert dir_digest(workspace / "data") == dir_digest(workspace / "again")
    snap = (workspace / "data" / cli.SNAPSHOT).read_text()
    assert "data_seed = 9\n" in snap and "sparsity = 0.05\n" in snap
    for line in (workspace / "data" / "train.manifest").read_text().splitlines():
        if line.startswith("observed_rate"):
            assert abs(float(line.split(" = ")[1]) - 0.05) < 0.005


def test_gen_data_refuses_zero_rate(tmp_path, capsys):
    (tmp_path / "zero.cfg").write_text("sparsity = 0\n")
    code = cli.main(["gen-data", "--config", str(tmp_path / "zero.cfg"), "--out",
                     str(tmp_path / "d")])
    assert code == cli.EXIT_CONFIG
    assert "untrainable" in capsys.readouterr().err


def test_unknown_key_is_config_error(tmp_path):
    (tmp_path / "bad.cfg").write_text("learning_rate = 0.1\n")
    assert cli.main(["gen-data", "--config", str(tmp_path / "bad.cfg"), "--out",
                     str(tmp_path / "d")]) == cli.EXIT_CONFIG


def test_missing_dataset_is_io_error(workspace, tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "nothing"), "--out",
                     str(tmp_path / "r")]) == cli.EXIT_IO


def test_train_then_eval(workspace, tmp_path, capsys):
    run = tmp_path / "run"
    assert cli.main(["train", "--config", str(workspace / "small.cfg"), "--data",
                     str(workspace / "data"), "--out", str(run), "--ablation",
                     "curvature-only", "--seed", "42"]) == 0
    rows = list(csv.DictReader(io.StringIO((run / "metrics.csv").read_text())))
    assert float(rows[0]["curvature"]) > 0
    snap = (run / cli.SNAPSHOT).read_text()
    assert "ablation = curvature-only\n" in snap and "seed = 42\n" in snap
    capsys.readouterr()
    args = ["eval", "--checkpoint", str(run / "checkpoint.ckpt"), "--data",
            str(workspace / "data"), "--out", str(tmp_path / "ev")]
    assert cli.main(args) == 0
    first = capsys.readouterr().out
    assert cli.main(args) == 0
    assert capsys.readouterr().out == first
    assert "vae_total = " in first and "total = " in first


def test_train_abort_exit_code(workspace, tmp_path, monkeypatch):
    def boom(*a, **kw):
        raise NonFiniteLossError("normal", math.nan)

    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["train", "--config", str(workspace / "small.cfg"), "--data",
                     str(workspace / "data"), "--out", str(tmp_path)]) == cli.EXIT_ABORT


def test_ablate_then_report(workspace, tmp_path):
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--config", str(workspace / "small.cfg"), "--data",
                     str(workspace / "data"), "--out", str(out), "--seeds", "1,2"]) == 0
    assert cli.main(["report", "--runs", str(out), "--out", str(tmp_path / "rep")]) == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "rep" / "summary.csv").read_text())))
    assert len({r["cell"] for r in rows}) == 4
    assert sum(1 for r in rows if r["t"]) == 1
    assert ((out / "report" / "summary.csv").read_bytes()
            == (tmp_path / "rep" / "summary.csv").read_bytes())


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "crvae", "--help"], capture_output=True,
                         text=True, check=True)
    for sub in ("gen-data", "train", "eval", "ablate", "report"):
        assert sub in res.stdout
