"""Command-line interface: argument parsing, dispatch, and exit-code mapping.

Verbs: generate | train | simulate | evaluate | diagnose | report.

Exit codes: 0 success, 2 validation error, 3 missing prerequisite, 4 data or
training error. Failures print exactly one machine-parseable line to stderr::

    cascadesim: error: kind=<validation|missing-prerequisite|data> message=<text>

The only environment override honored is ``CASCADESIM_OUT`` for the output
directory; an explicit ``--out`` wins over it.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Sequence

from . import harness
from .config import load_config
from .core import ConfigurationError, DataError, MissingPrerequisiteError
from .models import TrainingError
from .report import cmd_report

__all__ = ["main", "build_parser"]

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_MISSING_PREREQUISITE = 3
EXIT_DATA = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cascadesim",
        description=(
            "Cascade-ranking consistency toolkit: generate a synthetic ad "
            "world, train pre-ranking tiers, simulate the two-stage funnel, "
            "and measure how well the pre-ranker preserves the ranker's "
            "choices."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="VERB")

    def add_common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--config", required=True, help="path to the JSON config file")
        sp.add_argument("--out", default=None, help="override the output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the global seed")

    sp = sub.add_parser("generate", help="write the world files (or fixture logs)")
    add_common(sp)

    sp = sub.add_parser("train", help="train one model tier")
    add_common(sp)
    sp.add_argument("--tier", required=True, help="tier name from the config")

    sp = sub.add_parser("simulate", help="run pipelines and write the three logs")
    add_common(sp)
    sp.add_argument(
        "--pipeline",
        default="all",
        help="pipeline spec: collect | rank-as-prerank | TIER[*FACTOR][+optbid] | all",
    )

    sp = sub.add_parser("evaluate", help="compute metric CSVs from logs")
    add_common(sp)
    sp.add_argument("--pipeline", default=None, help="restrict to one log tag")
    sp.add_argument("--k", default=None, help="comma-separated win-set sizes")
    sp.add_argument("--c", default=None, help="comma-separated competitive-set sizes")

    sp = sub.add_parser("diagnose", help="slot-substitution consistency table")
    add_common(sp)
    sp.add_argument("--pipeline", default=None, help="tier pipeline to diagnose")

    sp = sub.add_parser("report", help="summary table and SVG plots")
    add_common(sp)
    return parser


def _parse_grid(text: str | None, flag: str) -> tuple[int, ...] | None:
    if text is None:
        return None
    try:
        values = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ConfigurationError(
            f"{flag} expects comma-separated integers, got {text!r}"
        ) from None
    if not values:
        raise ConfigurationError(f"{flag} must name at least one size")
    return values


def _fail(kind: str, code: int, exc: Exception) -> int:
    print(f"cascadesim: error: kind={kind} message={exc}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        out_override = args.out if args.out is not None else os.environ.get("CASCADESIM_OUT")
        cfg = load_config(args.config, seed_override=args.seed, out_override=out_override)
        if args.command == "generate":
            written = harness.cmd_generate(cfg)
        elif args.command == "train":
            written = harness.cmd_train(cfg, args.tier)
        elif args.command == "simulate":
            written = harness.cmd_simulate(cfg, args.pipeline)
        elif args.command == "evaluate":
            written = harness.cmd_evaluate(
                cfg,
                spec=args.pipeline,
                k_grid=_parse_grid(args.k, "--k"),
                c_grid=_parse_grid(args.c, "--c"),
            )
        elif args.command == "diagnose":
            written = harness.cmd_diagnose(cfg, args.pipeline)
        else:
            written = cmd_report(cfg)
    except ConfigurationError as exc:
        return _fail("validation", EXIT_VALIDATION, exc)
    except MissingPrerequisiteError as exc:
        return _fail("missing-prerequisite", EXIT_MISSING_PREREQUISITE, exc)
    except (DataError, TrainingError) as exc:
        return _fail("data", EXIT_DATA, exc)
    for path in written:
        print(path)
    return EXIT_OK
