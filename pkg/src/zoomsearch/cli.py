"""Command-line entry point.

Every subcommand reads an optional YAML config (``--config``), applies flag
overrides, runs, and prints one JSON line describing what it wrote. Failures
exit nonzero with a single JSON error line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .harness import DIFFICULTIES, VARIANTS, ExperimentConfig

EXIT_ERROR = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises on bad usage so main can report it as JSON."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML key-value config file")
    common.add_argument("--seed", type=_u64, help="master seed")
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    common.add_argument("--lambda", dest="lam", type=float, help="redundancy penalty weight")
    common.add_argument("--epsilon", type=float, help="IoU threshold of the penalty")
    common.add_argument("--max-turns", type=int)
    common.add_argument("--group-size", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="zoomsearch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write train/eval scene splits")
    sub.add_parser("coldstart", parents=[common], help="behavior-clone the scripted expert")
    p = sub.add_parser("train-rl", parents=[common], help="train one ablation variant")
    p.add_argument("--init", type=Path, help="cold-start checkpoint (otherwise computed)")
    p = sub.add_parser("eval", parents=[common], help="greedy evaluation of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=DIFFICULTIES + ("all",), default="all")
    p = sub.add_parser("run-ablation", parents=[common], help="train and evaluate A/B/C/DRIM")
    p.add_argument("--seeds", help="comma-separated master seeds (overrides the config)")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = dict(master_seed=args.seed, variant=args.variant, lam=args.lam,
                     epsilon=args.epsilon, max_turns=args.max_turns, group_size=args.group_size)
    seeds = getattr(args, "seeds", None)
    if seeds:
        overrides["ablation_seeds"] = tuple(_u64(s) for s in seeds.split(","))
    return cfg.with_overrides(**overrides)


def run(args: argparse.Namespace) -> dict:
    cfg = load_config(args)
    out: Path = args.out
    if args.command == "gen-data":
        paths = harness.cmd_gen_data(cfg, out)
        return {"written": {k: str(v) for k, v in paths.items()}}
    if args.command == "coldstart":
        return {"checkpoint": str(harness.cmd_coldstart(cfg, out))}
    if args.command == "train-rl":
        return {"checkpoint": str(harness.cmd_train_rl(cfg, out, args.init)), "variant": cfg.variant}
    if args.command == "eval":
        splits = DIFFICULTIES if args.split == "all" else (args.split,)
        report = harness.cmd_eval(cfg, args.checkpoint, out, splits)
        return {"success": report.success, "mean_T": report.mean_T}
    if args.command == "run-ablation":
        result = harness.cmd_run_ablation(cfg, out)
        u, p = result.iou_test()
        return {"table": result.table(), "mannwhitney_p": p, "seconds": round(result.seconds, 1)}
    raise AssertionError(args.command)


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(json.dumps({"error": "UsageError", "message": str(e)}), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except Exception as e:  # report every failure as one machine-readable line
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps({"ok": True, "command": args.command, **result}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
