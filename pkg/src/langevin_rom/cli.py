"""Command-line entry point: ``langevin-rom <subcommand> [--config ...]``.

Exit status is 0 on success, 2 for configuration errors and 3 when a
pipeline stage fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config, preset_names
from .pipeline import Pipeline, StageError

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

# subcommand -> stage name, per experiment kind where they differ
COMMANDS = {
    "generate": "data",
    "train-scores": "scores",
    "correlations": "correlations",
    "fit-mobility": "mobility",
    "simulate-rom": "rom",
    "validate": "validate",
}
VALIDATE_STAGE = {"ou-oracle": "identity", "cir-mc": "cir-inverse", "cir-analytic": "cir-analytic"}


def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; SUPPRESS keeps them from resetting values given earlier
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=d(None), help="preset name or YAML path")
    p.add_argument("--out", default=d(None), help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, default=d(None), help="root seed for every stage")
    p.add_argument("--threads", type=int, default=d(1))
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="langevin-rom", description=__doc__.splitlines()[0], parents=[_common(False)])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*COMMANDS, "run-all", "cir-analytic"):
        sub.add_parser(name, parents=[_common(True)])
    sub.add_parser("presets", help="list shipped presets")
    return parser


def _resolve(args):
    name = args.config
    if name is None:
        if args.command != "cir-analytic":
            raise ConfigError("--config is required")
        name = "cir-analytic"
    cfg = load_config(name)
    if args.command == "cir-analytic" and cfg.kind != "cir-analytic":
        raise ConfigError(f"config kind is {cfg.kind!r}, expected 'cir-analytic'")
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.threads < 1:
        raise ConfigError("--threads must be positive")
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "presets":
        print("\n".join(preset_names()))
        return EXIT_OK
    try:
        cfg = _resolve(args)
        pipe = Pipeline(cfg, args.out, args.threads)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command in ("run-all", "cir-analytic"):
            records = pipe.run()
        else:
            stage = COMMANDS[args.command]
            if args.command == "validate":
                stage = VALIDATE_STAGE.get(cfg.kind, stage)
            if stage not in pipe.stages():
                print(f"config error: {args.command} is not part of a {cfg.kind} run", file=sys.stderr)
                return EXIT_CONFIG
            records = {stage: pipe.run_stage(stage)}
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    for s, rec in records.items():
        print(json.dumps({"stage": s, "status": rec.status, "seconds": rec.seconds, **rec.summary}, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
