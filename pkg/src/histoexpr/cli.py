"""Command-line entry point: one subcommand per stage plus run-all and synthesize."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import STAGES, ConfigError, load_config, parse_overrides
from .pipeline import PipelineError, Run, reset_work_dir

EXIT_OK = 0
EXIT_STAGE_FAILED = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_CONFIG = 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, type=Path, help="INI config file")
    p.add_argument("--seed-override", action="append", default=[], metavar="NAME=VALUE",
                   help="override one seed from [seeds]; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="histoexpr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        _common(sub.add_parser(stage, help=f"run the {stage} stage"))
    p = sub.add_parser("run", help="run one named stage")
    _common(p)
    p.add_argument("--stage", required=True, choices=STAGES)
    p = sub.add_parser("run-all", help="run every stage in order")
    _common(p)
    p.add_argument("--reset", action="store_true", help="clear previous stage outputs and manifest first")
    p = sub.add_parser("status", help="print per-stage status and audit the manifest")
    _common(p)
    p = sub.add_parser("synthesize", help="write a synthetic cohort from the [synthetic] section")
    _common(p)
    p.add_argument("--out", required=True, type=Path)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    log = logging.getLogger("histoexpr")
    try:
        cfg = load_config(args.config, parse_overrides(args.seed_override))
    except ConfigError as e:
        log.error("%s", e)
        return EXIT_CONFIG

    if args.command == "synthesize":
        from .synthetic import generate_synthetic, write_synthetic

        if cfg.synthetic is None:
            log.error("config has no [synthetic] section")
            return EXIT_CONFIG
        write_synthetic(generate_synthetic(cfg.synthetic, seed=cfg.seeds.synthetic), args.out)
        return EXIT_OK

    if getattr(args, "reset", False):
        reset_work_dir(cfg.work_dir)
    try:
        run = Run(cfg)
        if args.command == "status":
            for stage in STAGES:
                print(f"{stage}\t{run.status(stage)}")
            problems = run.audit()
            for p in problems:
                print(f"audit: {p}")
            return EXIT_OK if not problems else EXIT_STAGE_FAILED
        if args.command == "run-all":
            run.run_all()
        else:
            run.run_stage(args.stage if args.command == "run" else args.command)
    except PipelineError as e:
        log.error("%s", e)
        from .pipeline import MissingArtifactError

        return EXIT_MISSING if isinstance(e, MissingArtifactError) else EXIT_STAGE_FAILED
    except (ValueError, RuntimeError) as e:
        log.error("stage failed: %s", e)
        return EXIT_STAGE_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
