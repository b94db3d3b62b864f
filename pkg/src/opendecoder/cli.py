"""Command-line entry point: one config file plus a stage subcommand.

Exit codes: 0 success, 1 config error, 2 missing upstream artifact,
3 runtime failure. The OPENDEC_LOG environment variable (error|info|debug)
controls verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from .config import ConfigError, load_config
from .pipeline import STAGES, MissingArtifactError, run_stage

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_MISSING_ARTIFACT = 2
EXIT_RUNTIME = 3

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    level_name = os.environ.get("OPENDEC_LOG", "info").lower()
    level = _LOG_LEVELS.get(level_name, logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="opendecoder",
        description="Score-modulated decoding pipeline: corpus generation, "
        "retrieval, indicator scoring, training, and noisy evaluation.",
    )
    parser.add_argument("--config", metavar="PATH", default=None,
                        help="YAML run config (defaults apply when omitted)")
    parser.add_argument("--stage", metavar="NAME", required=True,
                        choices=STAGES + ("all",),
                        help=f"pipeline stage: {', '.join(STAGES + ('all',))}")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--workers", type=int, default=None,
                        help="evaluation worker count (default from config)")
    parser.add_argument("--out", metavar="DIR", default=None,
                        help="output directory (default from config)")
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    log = logging.getLogger("opendecoder")
    try:
        cfg = load_config(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.workers is not None:
            overrides["workers"] = args.workers
        if args.out is not None:
            overrides["out_dir"] = args.out
        if overrides:
            cfg = dataclasses.replace(cfg, **overrides)
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        run_stage(cfg, args.stage)
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    except Exception as exc:  # noqa: BLE001 - boundary between CLI and library
        log.error("stage %s failed: %s", args.stage, exc, exc_info=True)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
