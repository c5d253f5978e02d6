"""`verify-chain`: re-validate every block of a chain dump."""
import argparse
import logging
from pathlib import Path

from cchp_chain.commands import EXIT_CHAIN_INVALID, EXIT_OK
from cchp_chain.errors import ChainFormatError
from cchp_chain.services.blockchain import verify_chain_bytes

logger = logging.getLogger("cmd_verify_chain")


def register(subparsers) -> None:
    parser = subparsers.add_parser("verify-chain", help="Validate a chain dump written by `run`")
    parser.add_argument("chain", help="Chain dump (chain.dat)")
    parser.set_defaults(handler=cmd_verify_chain)


def cmd_verify_chain(args: argparse.Namespace) -> int:
    try:
        data = Path(args.chain).read_bytes()
    except OSError as e:
        print(f"invalid: cannot read {args.chain}: {e}")
        return EXIT_CHAIN_INVALID
    try:
        failure = verify_chain_bytes(data)
    except ChainFormatError as e:
        print(f"invalid: parse error: {e}")
        return EXIT_CHAIN_INVALID
    if failure is not None:
        height, rejection = failure
        print(f"invalid: block {height}: {rejection}")
        return EXIT_CHAIN_INVALID
    print("Ok")
    return EXIT_OK
