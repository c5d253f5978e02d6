"""Exception hierarchy shared by every module."""
from typing import Optional


class CchpChainError(Exception):
    """Base class for all errors raised by cchp_chain."""


# Energy model and game

class NonPositiveParameter(CchpChainError):
    """A physical constant that must be strictly positive is not."""


class DomainError(CchpChainError):
    """An argument lies outside the domain of the operation."""


class InfeasiblePrices(CchpChainError):
    """p_c > e·p_m: no k1 keeps the best response inside [0, 1] for every bid."""


class K1OutOfRange(CchpChainError):
    """A CCHP's k1 lies outside its valid range (strict mode only)."""


# IoE protocol

class DuplicateId(CchpChainError):
    """The seed or id has already been registered."""


class SignatureInvalid(CchpChainError):
    """A signature does not verify under the claimed public key."""


class InsufficientFunds(CchpChainError):
    """A wallet cannot cover the requested transfer."""


# Blockchain

class EmptyBlock(CchpChainError):
    """A merkle root was requested over no transactions."""


class NonceNotFound(CchpChainError):
    """Mining gave up after max_attempts without a valid nonce."""


class NegativeBalance(CchpChainError):
    """Replaying the chain drives a wallet below zero."""

    def __init__(self, tx_id: bytes, address: str):
        super().__init__(f"tx {tx_id.hex()[:16]} drives {address} negative")
        self.tx_id = tx_id
        self.address = address


class ChainFormatError(CchpChainError):
    """A serialized chain or block could not be parsed."""


class BlockRejected(CchpChainError):
    """A block failed validation when appended."""


# Simulation

class UnknownTarget(CchpChainError):
    """A fault names a node, round or tick that does not exist."""


class IsolationViolation(CchpChainError):
    """An IoE message tried to leave its city."""


class SimulationError(CchpChainError):
    """A module error annotated with the tick and node where it happened."""

    def __init__(self, message: str, tick: int, node: str):
        super().__init__(f"[tick {tick} @ {node}] {message}")
        self.tick = tick
        self.node = node


class InvariantViolation(CchpChainError):
    """A run finished but one of the in-run invariant suites failed."""

    def __init__(self, invariant: str, detail: str = ""):
        super().__init__(f"{invariant}: {detail}" if detail else invariant)
        self.invariant = invariant


# Scenario files

class ScenarioError(CchpChainError):
    """A scenario document failed to parse or validate."""

    def __init__(self, message: str, path: str = "<scenario>", line: Optional[int] = None):
        location = f"{path}:{line}" if line is not None else path
        super().__init__(f"{location}: {message}")
        self.path = path
        self.line = line
