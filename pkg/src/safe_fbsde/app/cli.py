"""Command-line entry point.

    safe-fbsde train --config run.json --out-dir runs/a --plots
    safe-fbsde eval --checkpoint runs/a/checkpoint.json --out-dir runs/a/eval
    safe-fbsde solve-check | grad-check | bench --out-dir ...

Exit codes: 0 success, 1 configuration or IO error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, NumericalError, load_config

COMMANDS = ("train", "eval", "solve-check", "grad-check", "bench")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="safe-fbsde", description="Decentralized safe multi-agent FBSDE toolkit")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration; missing keys take defaults")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out-dir", default=f"runs/{name}", help="output directory (created if missing)")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
        if name in ("train", "eval"):
            p.add_argument("--checkpoint", help="model checkpoint to start from (train) or evaluate (eval)")
        if name == "train":
            p.add_argument("--max-iters", type=int, help="stop after this many iterations")
        if name in ("train", "eval", "bench"):
            p.add_argument("--plots", action="store_true", help="render PNG figures next to the outputs")
    return ap


def _dispatch(args) -> dict:
    from . import runs

    cfg = load_config(args.config, seed=args.seed)
    if args.command == "train":
        if args.max_iters is not None and args.max_iters < 1:
            raise ConfigError("--max-iters must be >= 1")
        return runs.run_train(cfg, args.out_dir, args.checkpoint, args.max_iters, args.plots)
    if args.command == "eval":
        return runs.run_eval(cfg, args.out_dir, args.checkpoint, args.plots)
    if args.command == "solve-check":
        return runs.run_solvecheck(cfg, args.out_dir)
    if args.command == "grad-check":
        return runs.run_gradcheck(cfg, args.out_dir)
    return runs.run_bench(cfg, args.out_dir, args.plots)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = _dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, FloatingPointError, OverflowError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, indent=2, default=float))
    if args.command in ("solve-check", "grad-check") and not summary.get("passed", True):
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
