"""Command-line entry point.

Subcommands:
    run <config>            full sweep: metrics CSVs, summary.csv, figures off
    verify <config>         per-run check suite only, writes lemma_report.json
    bounds --gamma ...      print every bound for one parameter set
    mnist-prepare <dir>     convert two MNIST digits to the text dataset format
    report <experiment-dir> render PNG figures next to the CSVs
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .experiment import ConfigError, execute, load_config, run_experiment
from .theory import compute_bounds


def _cmd_run(args) -> int:
    try:
        spec = load_config(args.config)
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    status = run_experiment(spec, workers=args.workers)
    if status == 0:
        print(f"wrote {spec.out_path}/")
    return status


def _cmd_verify(args) -> int:
    try:
        spec = load_config(args.config)
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    if not spec.theory_checks:
        print("config error: verify needs theory_checks = true", file=sys.stderr)
        return 2
    results = execute(spec, workers=args.workers, skip_risk=True, lemma_mode="always")
    failed = 0
    for r in results:
        print(f"-- m={r.m} q={r.q:g} seed={r.seed} "
              f"(gamma={r.gamma:.6g}, lambda={r.bounds.lam:.6g}, "
              f"width_ok={r.bounds.width_ok})")
        for c in r.lemma.checks:
            mark = "PASS" if c.passed else ("SKIP" if c.passed is None else "FAIL")
            print(f"  [{mark}] {c.check_id}: observed={c.observed:.6g} "
                  f"bound={c.bound:.6g} slack={c.slack:.3g}"
                  + (f"  ({c.note})" if c.note else ""))
            if c.passed is False:
                failed += 1
    print(f"report: {spec.out_path / 'lemma_report.json'}")
    return 0 if failed == 0 else 1


def _cmd_bounds(args) -> int:
    report = compute_bounds(args.gamma, args.eta, args.T, args.m, args.d, args.delta)
    for key, val in report.as_dict().items():
        print(f"{key:>16s} = {val}")
    return 0


def _cmd_mnist_prepare(args) -> int:
    from .data import load_mnist_binary, save_dataset_text

    ds = load_mnist_binary(args.dir, args.pos, args.neg, split=args.split)
    out = args.out or str(Path(args.dir) / f"binary_{args.pos}v{args.neg}_{args.split}.txt")
    save_dataset_text(out, ds)
    print(f"{len(ds)} examples ({args.pos} vs {args.neg}, {args.split}) -> {out}")
    return 0


def _cmd_report(args) -> int:
    from .report import render_experiment

    paths = render_experiment(args.dir, dpi=args.dpi, per_cell=args.per_cell)
    for p in paths:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lazydrop",
        description="dropout training of two-layer relu networks with bound verification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a sweep config")
    p.add_argument("config")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("verify", help="run the per-iterate check suite only")
    p.add_argument("config")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("bounds", help="print the bound report for one setting")
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--eta", type=float, required=True)
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--delta", type=float, default=0.05)
    p.set_defaults(func=_cmd_bounds)

    p = sub.add_parser("mnist-prepare", help="convert two MNIST digits to text format")
    p.add_argument("dir")
    p.add_argument("--pos", type=int, required=True)
    p.add_argument("--neg", type=int, required=True)
    p.add_argument("--split", default="train", choices=("train", "test"))
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_mnist_prepare)

    p = sub.add_parser("report", help="render figures for a finished experiment")
    p.add_argument("dir")
    p.add_argument("--dpi", type=int, default=130)
    p.add_argument("--per-cell", action="store_true")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
