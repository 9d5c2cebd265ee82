"""Command-line entry point.

Subcommands chain the pipeline stages off one config file with explicit
seeds. Exit codes: 0 success, 2 config error, 3 numerical failure, 4 verdict
failure (so CI can gate on the acceptance properties).
"""

from __future__ import annotations

import argparse
import json
import sys

from .autodiff import NumericsError
from .config import ConfigError, config_hash, load_config, validate_config
from .pipeline import (
    MissingInputError,
    cmd_attack,
    cmd_eval,
    cmd_meta,
    cmd_pretrain,
    cmd_report,
    cmd_unlearn,
    cmd_verify,
    open_manifest,
    run_root,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICS = 3
EXIT_VERDICT = 4

STAGES = ("pretrain", "unlearn", "meta", "attack", "eval", "report", "verify", "all")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metaunlearn",
        description="Toy-scale laboratory for attack-resistant concept unlearning in conditional diffusion models.",
    )
    parser.add_argument("command", choices=STAGES, help="pipeline stage to run ('all' chains every stage)")
    parser.add_argument("--config", metavar="PATH", default=None, help="YAML config file (defaults are built in)")
    parser.add_argument(
        "--set",
        metavar="dotted.key=value",
        action="append",
        default=[],
        dest="overrides",
        help="override a single config key (repeatable)",
    )
    parser.add_argument("--seed", type=int, default=None, help="override the top-level seed")
    parser.add_argument("--jobs", type=int, default=1, help="process fan-out for independent attack runs")
    parser.add_argument("--out", metavar="DIR", default="out", help="output root (runs live in DIR/<config-hash>/)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        exp = validate_config(cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "verify":
        ok = cmd_verify(quick=True)
        return EXIT_OK if ok else EXIT_NUMERICS

    man = open_manifest(exp, args.out)
    print(f"run root: {run_root(exp, args.out)}  (config hash {config_hash(cfg)})")

    try:
        if args.command in ("pretrain", "all"):
            path = cmd_pretrain(exp, man)
            print(f"pretrain checkpoint: {path}")
        if args.command in ("unlearn", "all"):
            path = cmd_unlearn(exp, man)
            print(f"unlearn checkpoint: {path}")
        if args.command in ("meta", "all"):
            path = cmd_meta(exp, man)
            print(f"meta checkpoint: {path}")
        if args.command in ("attack", "all"):
            paths = cmd_attack(exp, man, jobs=args.jobs)
            print(f"attack curves: {len(paths)} files under {man.root / 'attack'}")
        if args.command in ("eval", "all"):
            files = cmd_eval(exp, man)
            for stage, path in files.items():
                print(f"eval report ({stage}): {path}")
        if args.command in ("report", "all"):
            summary, gate_ok = cmd_report(exp, man)
            print(json.dumps(summary, indent=1))
            if not gate_ok:
                print("verdict gate FAILED", file=sys.stderr)
                return EXIT_VERDICT
    except MissingInputError as err:
        print(f"missing input: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericsError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICS
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
