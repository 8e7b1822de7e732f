# app/main.py
import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv
load_dotenv()

from pydantic import ValidationError

from app.errors import RadioSiamError
from app.services.registry import REGISTRY_ENABLED, RunRecorder
from app.commands import evaluate, extract, pretrain, sweep, synth

LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")

logger = logging.getLogger("radiosiam.main")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageParser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; this CLI reserves 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = UsageParser(prog="radiosiam",
                         description="imbalance-aware 3D self-supervised radiomics")
    parser.add_argument("--no-registry", action="store_true", help="do not record runs in the database")
    parser.add_argument("--log-level", default=LOG_LEVEL)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=UsageParser)
    for module in (synth, pretrain, extract, evaluate, sweep):
        module.register(sub)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(asctime)s %(levelname)s %(name)s %(message)s")

    recorder = RunRecorder(enabled=REGISTRY_ENABLED and not args.no_registry)
    try:
        return args.handler(args, recorder)
    except RadioSiamError as e:
        logger.error("[main] %s failed: %s", args.command, e)
        recorder.fail_run(str(e))
        return e.exit_code
    except ValidationError as e:
        logger.error("[main] %s: invalid configuration: %s", args.command, e)
        recorder.fail_run(str(e))
        return EXIT_DATA
    except (ArithmeticError, FloatingPointError) as e:
        logger.exception("[main] %s: numeric failure: %s", args.command, e)
        recorder.fail_run(str(e))
        return EXIT_NUMERIC
    except OSError as e:
        logger.error("[main] %s: %s", args.command, e)
        recorder.fail_run(str(e))
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
