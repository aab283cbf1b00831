#!/usr/bin/env python3
import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from smoothing_lab.handler import EXIT_LAB_ERROR, SUBCOMMANDS, run
from smoothing_lab.models import apply_overrides, load_config
from smoothing_lab.utils import LabError, logger


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smoothing-lab",
        description="Classify environment laws, iterate Laplace curves and simulate branching random walks.",
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", type=Path, required=True, help="experiment JSON document")
    parser.add_argument("--seed", type=int, help="master seed (overrides the document)")
    parser.add_argument("--out", type=Path, help="output directory (overrides the document)")
    parser.add_argument("--threads", type=int, default=1, help="worker threads; never changes results")
    parser.add_argument("--format", dest="fmt", choices=("csv", "json"), default="csv")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        config = apply_overrides(config, seed=args.seed, out=None if args.out is None else str(args.out))
    except LabError as err:
        logger.error("config rejected", extra={"error": err.code})
        print(json.dumps({"action": args.subcommand, "status": EXIT_LAB_ERROR, **err.to_record()}, sort_keys=True))
        return EXIT_LAB_ERROR

    status, payload = run(args.subcommand, config, Path(config.out), args.fmt, max(args.threads, 1))
    print(json.dumps(payload, sort_keys=True))
    return status


if __name__ == "__main__":
    sys.exit(main())
