"""Command-line entry point: ``crvae {gen-data,train,eval,ablate,report}``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 non-finite
training abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import config as cfgmod
from . import evalstat
from .objective import ABLATIONS, NonFiniteLossError
from .scenegen import generate_dataset, load_split
from .trainer import train

EXIT_CONFIG, EXIT_IO, EXIT_ABORT = 2, 3, 4
SNAPSHOT = "resolved_config.txt"

log = logging.getLogger("crvae")


def _load_config(args) -> cfgmod.RunConfig:
    run = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    overrides = {}
    if getattr(args, "ablation", None):
        overrides["ablation"] = args.ablation
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    if overrides:
        mapping = cfgmod.to_mapping(run)
        if "ablation" in overrides:
            # switching cell re-derives the loss weights from its preset
            for key in ("beta", "lambda_curv", "lambda_normal", "lambda_edge",
                        "curvature_operator"):
                mapping.pop(key)
        run = cfgmod.resolve({**mapping, **overrides})
    return run


def _snapshot(out: Path, run: cfgmod.RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / SNAPSHOT).write_text(cfgmod.dump(run))


def cmd_gen_data(args) -> int:
    run = _load_config(argparse.Namespace(config=args.config))
    seed = run.data_seed if args.seed is None else args.seed
    if seed != run.data_seed:
        run = replace(run, data_seed=seed)
    out = Path(args.out)
    manifests = generate_dataset(out, run.data, seed)
    _snapshot(out, run)
    for split, m in manifests.items():
        print(f"{split}: {len(m.paths)} scenes, {m.info['samples_total']} depth samples "
              f"from {m.info['valid_pixels_total']} valid pixels "
              f"(rate {float(m.info['observed_rate']):.4f})")
    return 0


def cmd_train(args) -> int:
    run = _load_config(args)
    out = Path(args.out)
    splits = [load_split(args.data, s) for s in ("train", "val", "test")]
    _snapshot(out, run)
    try:
        record = train(run, *splits, out_dir=out)
    except NonFiniteLossError as exc:
        print(f"training aborted: non-finite {exc.component}", file=sys.stderr)
        return EXIT_ABORT
    t = record.test
    print(f"best epoch {record.best_epoch}, stopped at {record.stopping_epoch}; "
          f"test recon {t.recon:.6f} kl {t.kl:.4f} curvature {t.curvature:.6f} "
          f"total {t.total:.6f}")
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    br = evalstat.evaluate(args.checkpoint, args.data, args.split, sample_seed=args.sample_seed)
    lines = {**br.as_dict(), "vae_total": br.vae_total}
    text = "".join(f"{k} = {v!r}\n" for k, v in lines.items())
    (out / f"eval_{args.split}.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_ablate(args) -> int:
    base = _load_config(argparse.Namespace(config=args.config))
    seeds = tuple(int(s) for s in args.seeds.split(","))
    cells = args.cells.split(",") if args.cells else list(ABLATIONS)
    matrix = [evalstat.AblationCell(c, seeds) for c in cells]
    out = Path(args.out)
    _snapshot(out, base)
    report = evalstat.run_ablation(args.data, out, base, matrix, jobs=args.jobs)
    evalstat.emit_report(report, out / "report")
    for cell in cells:
        aborted = report.aborted(cell)
        if aborted:
            print(f"{cell}: aborted seeds {aborted}")
    print(evalstat.summary_csv(report), end="")
    return 0


def cmd_report(args) -> int:
    report = evalstat.aggregate(args.runs)
    evalstat.emit_report(report, args.out)
    print(evalstat.summary_csv(report), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crvae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic sparse-depth dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--ablation", choices=ABLATIONS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--sample-seed", type=int,
                   help="evaluate with sampled latents instead of the posterior mean")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train the ablation matrix and write the report")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--seeds", default=",".join(map(str, evalstat.DEFAULT_SEEDS)))
    a.add_argument("--cells", help="comma-separated subset of " + ", ".join(ABLATIONS))
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="re-aggregate an ablation output directory")
    r.add_argument("--runs", required=True, help="output directory of a previous ablate")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.ERROR if args.quiet else (logging.WARNING, logging.INFO, logging.DEBUG)[
        min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"aborted: non-finite {exc.component}", file=sys.stderr)
        return EXIT_ABORT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # bad values reaching the library (rate 0, mismatched grids, corrupt files)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
