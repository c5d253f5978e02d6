"""cchp-chain command-line entry point."""
import argparse
import logging
import sys
from typing import List, Optional

from cchp_chain import __version__
from cchp_chain.commands import (
    EXIT_CHAIN_INVALID,
    EXIT_CONFIG_INVALID,
    EXIT_INVARIANT_VIOLATION,
    run,
    solve,
    table,
    verify_chain,
)
from cchp_chain.config import LOG_LEVEL
from cchp_chain.errors import (
    BlockRejected,
    CchpChainError,
    ChainFormatError,
    DomainError,
    InfeasiblePrices,
    K1OutOfRange,
    NonPositiveParameter,
    ScenarioError,
)

logger = logging.getLogger("cli")

COMMANDS = (solve, table, run, verify_chain)
CONFIG_ERRORS = (ScenarioError, DomainError, InfeasiblePrices, K1OutOfRange, NonPositiveParameter)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cchp-chain",
        description="CCHP energy trading with a leader-follower market and a proof-of-work ledger.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=LOG_LEVEL, help="DEBUG, INFO, WARNING or ERROR")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except CONFIG_ERRORS as e:
        logger.error(f"❌ Invalid configuration: {e}")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_CONFIG_INVALID
    except (ChainFormatError, BlockRejected) as e:
        logger.error(f"❌ Invalid chain: {e}")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_CHAIN_INVALID
    except CchpChainError as e:
        logger.error(f"❌ Run failed: {e}")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INVARIANT_VIOLATION


if __name__ == "__main__":
    sys.exit(main())
