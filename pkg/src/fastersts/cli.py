"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench, checkpoint, gradcheck
from .config import ConfigError, ModelConfig
from .data import DataError, NormStats, clean, load_csv, split_and_window, synth_generate, write_csv, write_rows
from .model import FasterSTS
from .tensor import NumericalError
from .training import evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _sweep(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad sweep {text!r}; expected e.g. 256,512,1024") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fastersts", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model and write checkpoint + report")
    t.add_argument("--config", required=True, help="ModelConfig JSON")
    t.add_argument("--data", help="CSV file (sidecar alongside) or a directory holding one; synthetic if omitted")
    t.add_argument("--out", default=".", help="output directory")

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)

    b = sub.add_parser("bench", help="time the graph or kernel contractions")
    b.add_argument("target", choices=["graph", "kernel"])
    b.add_argument("--sweep", type=_sweep)
    b.add_argument("--reps", type=int, default=9)
    b.add_argument("--d-e", type=int, default=8)
    b.add_argument("--d", type=int, default=8)
    b.add_argument("--T", type=int, default=12)
    b.add_argument("--H", type=int, default=32)
    b.add_argument("--threads", type=int, default=1, help="BLAS threads (acceptance uses 1)")
    b.add_argument("--json", help="also write a JSON summary with slopes and dispersion")

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and the tiny model")
    g.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("synth", help="write a synthetic dataset as CSV (+ JSON sidecar with --out)")
    s.add_argument("--nodes", type=int, required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--interval", type=int, default=5)
    s.add_argument("--noise", type=float, default=1.0)
    s.add_argument("--weekly", type=float, default=0.2)
    s.add_argument("--out")
    return p


def _resolve_csv(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        found = sorted(p.glob("*.csv"))
        if len(found) != 1:
            raise DataError(f"{p} must contain exactly one .csv file, found {len(found)}")
        return found[0]
    if not p.exists():
        raise DataError(f"{p} does not exist")
    return p


def cmd_train(args) -> int:
    cfg = ModelConfig.load(args.config)
    if args.data:
        ds = load_csv(_resolve_csv(args.data))
    else:
        ds = synth_generate(cfg.N, 2016, cfg.seed)
    if ds.n_nodes != cfg.N:
        raise DataError(f"config N={cfg.N} but data has {ds.n_nodes} nodes")
    tr, va, te, stats = split_and_window(clean(ds), cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = train(FasterSTS(cfg), tr, va, stats, te, cfg, checkpoint_path=out / "checkpoint.fsts")
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    print(json.dumps(report.test, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, norm = checkpoint.load(args.checkpoint)
    ds = load_csv(_resolve_csv(args.data))
    if ds.n_nodes != model.cfg.N:
        raise DataError(f"checkpoint expects {model.cfg.N} nodes, data has {ds.n_nodes}")
    _, _, te, stats = split_and_window(clean(ds), model.cfg)
    if norm is not None:
        stats = NormStats(norm["mean"], norm["std"])
    print(json.dumps(evaluate(model, te, stats), indent=2))
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.target == "graph":
        sweep = args.sweep or [256, 512, 1024, 2048, 4096]
        results = bench.bench_graph_ops(sweep, args.d_e, args.T, args.H, args.reps, threads=args.threads)
        params = dict(d_e=args.d_e, T=args.T, H=args.H, reps=args.reps, threads=args.threads)
    else:
        sweep = args.sweep or [512, 1024, 2048]
        results = bench.bench_kernel(args.T, args.H, args.d, sweep, args.reps, threads=args.threads)
        params = dict(d=args.d, T=args.T, H=args.H, reps=args.reps, threads=args.threads)
    bench.write_csv(results, sys.stdout)
    if args.json:
        Path(args.json).write_text(json.dumps(bench.summary(results, **params), indent=2) + "\n",
                                   encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.seed)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name:28s} rel_err={r.error:.3e} tol={r.tol:g}")
    bad = [r.name for r in results if not r.ok]
    if bad:
        print("offenders: " + ", ".join(bad), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_synth(args) -> int:
    ds = synth_generate(args.nodes, args.steps, args.seed, interval_minutes=args.interval,
                        noise=args.noise, weekly=args.weekly)
    if args.out:
        write_csv(ds, args.out)
    else:
        write_rows(ds, sys.stdout)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
            "gradcheck": cmd_gradcheck, "synth": cmd_synth}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"fastersts: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (DataError, ConfigError, checkpoint.CheckpointError, OSError, json.JSONDecodeError) as exc:
        print(f"fastersts: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"fastersts: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError) as exc:
        print(f"fastersts: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
