#!/usr/bin/env python3
"""
Wave Control Toolkit - batch analyses
=====================================

Usage:
    python analyze.py configs/cascade.json --all
    python analyze.py configs/short_horizon.json --observability --out reports/short
    python analyze.py configs/cascade.json --fredholm --log-level DEBUG --json-logs

Exit status:
    0  every selected analysis completed
    2  the config (or an analysis input) is invalid
    3  a numerical failure; the partial report is still written
"""

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

# Add project to path
sys.path.insert(0, str(Path(__file__).parent))

from src import __version__
from src.analysis_runner import ANALYSES, AnalysisRunner, RunConfig
from src.core.exceptions import EXIT_INPUT_ERROR, WaveControlError
from src.core.logging_config import get_logger, setup_logging
from src.core.settings import get_settings

logger = get_logger("analyze")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="analyze",
        description="Boundary controllability analyses for two coupled 1-D wave equations.",
    )
    parser.add_argument("config", help="JSON run config")
    parser.add_argument("--all", action="store_true", help="run every analysis")
    parser.add_argument("--simulate", action="store_true", help="solve the system from the configured data")
    parser.add_argument("--observability", action="store_true", help="weak observability verdict")
    parser.add_argument("--uc", action="store_true", help="constant-coefficient unique continuation")
    parser.add_argument("--fattorini", action="store_true", help="frequency scan (time-independent coefficients)")
    parser.add_argument("--fredholm", action="store_true", help="cascade Fredholm criterion")
    parser.add_argument("--compactness", action="store_true", help="singular values of the difference operator")
    parser.add_argument("--out", default=None, help="run directory (default: config output_dir or settings)")
    parser.add_argument("--workers", type=int, default=1, help="threads for the parallel analyses")
    parser.add_argument("--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"], type=str.upper)
    parser.add_argument("--json-logs", action="store_true", help="structured JSON logs on stderr")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return parser


def selected_analyses(args: argparse.Namespace, config: RunConfig) -> List[str]:
    """Flags win over the config's own list; --all selects everything."""
    if args.all:
        return list(ANALYSES)
    flagged = [name for name in ANALYSES if getattr(args, name)]
    return flagged or list(config.analyses)


def report_error(error: WaveControlError) -> None:
    print(json.dumps(error.to_dict(include_details=True), sort_keys=True, default=str), file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        settings = get_settings()
    except Exception as e:
        print(f"invalid settings: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    setup_logging(
        level=args.log_level or settings.log_level,
        json_logs=args.json_logs or settings.json_logs,
        log_file=settings.log_file,
    )

    try:
        config = RunConfig.from_file(args.config)
        analyses = selected_analyses(args, config)
        if not analyses:
            parser.print_usage(sys.stderr)
            print("analyze: select at least one analysis (or --all)", file=sys.stderr)
            return EXIT_INPUT_ERROR
        runner = AnalysisRunner(settings, output_dir=args.out, workers=max(1, args.workers))
        report = runner.run(config, analyses)
    except WaveControlError as e:
        logger.error(f"Run aborted: {e}")
        report_error(e)
        return e.exit_code

    for item in report.analyses:
        verdict = item.payload.get("verdict") or item.payload.get("reason") or ""
        print(f"{item.name:<14} {item.status:<8} {verdict}")
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
