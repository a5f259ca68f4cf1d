"""Command line: train | eval | sweep | export.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 training
aborted on non-finite values, 1 anything else.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .experiment import cmd_eval, cmd_export, cmd_sweep, cmd_train
from .marl import TrainingAborted


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="INI run configuration")
    p.add_argument("--seed", type=_int_list, help="comma-separated seeds (overrides [run] seeds)")
    p.add_argument("--variant", help="pa-mrl | pa-mrl-alt-encoder | marl-noprompt")
    p.add_argument("--n-ctx", type=int, dest="n_ctx", help="number of learnable context rows")
    p.add_argument("--episodes", type=int, help="training iterations")
    p.add_argument("--out", help="output directory")
    p.add_argument("--sequential", action="store_true", help="collect actors one after another")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pamrl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _run_options(sub.add_parser("train", help="pretrain adapters and train each seed"))

    sw = sub.add_parser("sweep", help="train once per n_ctx value and seed")
    _run_options(sw)
    sw.add_argument("--values", type=_int_list, default=[0, 2, 4, 8, 16], help="n_ctx values")

    ev = sub.add_parser("eval", help="deterministic evaluation of trained runs")
    ev.add_argument("runs", nargs="+", help="run directories")
    ev.add_argument("--episodes", type=int, help="evaluation episodes per actor")
    ev.add_argument("--seed", type=int, help="evaluation seed (default: the run's seed)")

    ex = sub.add_parser("export", help="plot-ready CSVs from finished runs")
    ex.add_argument("runs", nargs="+", help="run directories")
    ex.add_argument("--out", required=True, help="output directory")
    ex.add_argument("--window", type=int, default=50, help="smoothing window in iterations")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("train", "sweep"):
            cfg = load_config(args.config).with_overrides(
                seeds=args.seed, variant=args.variant, n_ctx=args.n_ctx, episodes=args.episodes,
                out=args.out, sequential=args.sequential,
            )
            if args.command == "train":
                for d in cmd_train(cfg):
                    print(d)
            else:
                print(cmd_sweep(cfg, args.values))
        elif args.command == "eval":
            for run in args.runs:
                print(cmd_eval(run, args.episodes, args.seed))
        else:
            print(cmd_export(args.runs, args.out, smoothing=args.window))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
