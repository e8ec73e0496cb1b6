"""Command-line entry point.

Verbs: train, invert, reconstruct, edit, fig3, table1, sweep-scale,
baseline-random, report.  Exit codes: 0 success, 2 config error,
3 checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import CheckpointError, ConfigError
from .experiments import KINDS, ExperimentConfig, load_config, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="invlab",
        description="Train small conditional generative models and study their inversions.")
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        p.add_argument("--config", help="JSON experiment config", default=None)
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--checkpoint", default=None, help="override the checkpoint path")
        if kind == "report":
            p.add_argument("inputs", nargs="*", help="run directories to aggregate")
    return parser


def config_from_args(args) -> ExperimentConfig:
    overrides = {"kind": args.kind}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.checkpoint is not None:
        overrides["checkpoint"] = args.checkpoint
    if getattr(args, "inputs", None):
        overrides["report_inputs"] = list(args.inputs)
    if args.config:
        return load_config(args.config, overrides)
    return ExperimentConfig.from_dict(overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        result = run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    print(json.dumps(result, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
