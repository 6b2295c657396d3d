import argparse
import logging
import sys
from typing import Optional, Sequence

from fmtnet import settings
from fmtnet.errors import exit_code_for

# Setup Logging
logging.basicConfig(level=settings.LOG_LEVEL, format=settings.LOG_FORMAT)
logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmtnet", description="Temporal feature filter toolkit")
    subparsers = parser.add_subparsers(dest="command", required=True)

    from fmtnet.commands import evaluate, gen_data, info, perturb, train, warp_demo
    for command in (gen_data, perturb, train, evaluate, warp_demo, info):
        command.register(subparsers)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logger.info("Running %s", args.command)
    try:
        args.handler(args)
    except Exception as exc:
        code = exit_code_for(exc)
        if code is None:
            raise
        print(f"fmtnet {args.command}: {exc}", file=sys.stderr)
        return code
    logger.info("%s finished", args.command)
    return 0


if __name__ == "__main__":
    sys.exit(main())
