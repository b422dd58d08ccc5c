"""``medcoder <command> --config <path> [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 usage error, 3 missing dependency, 4 data error.
Log verbosity comes from ``MEDCODER_LOG_LEVEL`` (default ``INFO``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from medcoder.errors import MedcoderError
from medcoder.metrics import MetricReport
from medcoder.pipeline import COMMANDS, RunConfig, run_pipeline

LOG_ENV = "MEDCODER_LOG_LEVEL"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medcoder", description="Multimodal ICD-10 coding pipeline.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="run configuration JSON")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="override the config output directory")
    return parser


def configure_logging() -> None:
    level = os.environ.get(LOG_ENV, "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.output_dir = args.out
        result = run_pipeline(cfg, args.command)
    except MedcoderError as exc:
        logging.getLogger("medcoder").error("%s", exc)
        return exc.exit_code
    if isinstance(result, MetricReport):
        sys.stdout.write(result.table())
    elif result is not None:
        sys.stdout.write(json.dumps(result, sort_keys=True, default=str) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
