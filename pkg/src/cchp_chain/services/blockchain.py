"""Inter-city blockchain sub-system.

Blocks carry the energy transactions settled in the IoE sub-systems, sealed by
proof of work and replicated on every APG. The APG that wins the mining race
leads one consensus round: every other APG audits the block and broadcasts a
signed verdict, the leader tallies them, rejectors get one re-verification
round with the blocks they miss, and the block is committed or discarded.
"""
import hashlib
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from cchp_chain.config import (
    DIFFICULTY_BITS,
    MAX_MINING_ATTEMPTS,
    MINING_REWARD,
    QUORUM,
    RESPONSE_TIMEOUT_TICKS,
    SIGNATURE_SCHEME,
)
from cchp_chain.errors import (
    BlockRejected,
    ChainFormatError,
    DomainError,
    EmptyBlock,
    NegativeBalance,
    NonceNotFound,
    SignatureInvalid,
)
from cchp_chain.services.codec import Decoder, Encoder, sha256
from cchp_chain.services.crypto import get_scheme
from cchp_chain.services.ioe_protocol import (
    EnergyTransaction,
    Identity,
    KeyRegistry,
    RejectedMessage,
    verify_transaction,
)
from cchp_chain.simulation.events import Event, EventLoop

logger = logging.getLogger("blockchain")

ZERO_HASH = bytes(32)
CHAIN_MAGIC = b"CCHPCHN\x01"
QUORUM_RULES = ("all", "majority")
_NONCE_MASK = (1 << 64) - 1


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockHeader:
    prev_hash: bytes
    merkle_root: bytes
    timestamp: int
    difficulty_bits: int
    nonce: int
    miner: str

    def _prefix(self) -> bytes:
        return (
            Encoder()
            .bytes_(self.prev_hash)
            .bytes_(self.merkle_root)
            .u64(self.timestamp)
            .u64(self.difficulty_bits)
            .getvalue()
        )

    def _suffix(self) -> bytes:
        return Encoder().text(self.miner).getvalue()

    def to_bytes(self) -> bytes:
        return self._prefix() + Encoder().u64(self.nonce).getvalue() + self._suffix()

    def digest(self) -> bytes:
        return sha256(self.to_bytes())

    @classmethod
    def decode(cls, decoder: Decoder) -> "BlockHeader":
        return cls(
            prev_hash=decoder.bytes_(),
            merkle_root=decoder.bytes_(),
            timestamp=decoder.u64(),
            difficulty_bits=decoder.u64(),
            nonce=decoder.u64(),
            miner=decoder.text(),
        )


@dataclass(frozen=True)
class CoinbaseTx:
    """Mining reward; it has no counterparty."""

    miner: str
    amount: int
    height: int
    timestamp: int

    def to_bytes(self) -> bytes:
        return (
            Encoder()
            .text("coinbase")
            .text(self.miner)
            .u64(self.amount)
            .u64(self.height)
            .u64(self.timestamp)
            .getvalue()
        )

    @property
    def tx_id(self) -> bytes:
        return sha256(self.to_bytes())

    @classmethod
    def decode(cls, decoder: Decoder) -> "CoinbaseTx":
        tag = decoder.text()
        if tag != "coinbase":
            raise ChainFormatError(f"expected coinbase record, found {tag!r}")
        return cls(decoder.text(), decoder.u64(), decoder.u64(), decoder.u64())


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    coinbase: Optional[CoinbaseTx]
    txs: Tuple[EnergyTransaction, ...] = ()

    @property
    def is_genesis(self) -> bool:
        return self.coinbase is None

    def tx_ids(self) -> List[bytes]:
        ids = [self.coinbase.tx_id] if self.coinbase is not None else []
        return ids + [tx.tx_id for tx in self.txs]

    def digest(self) -> bytes:
        return self.header.digest()

    def to_bytes(self) -> bytes:
        encoder = Encoder().bytes_(self.header.to_bytes())
        encoder.bytes_(self.coinbase.to_bytes() if self.coinbase is not None else b"")
        encoder.u64(len(self.txs))
        for tx in self.txs:
            encoder.bytes_(tx.to_bytes())
        return encoder.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Block":
        decoder = Decoder(data)
        header_bytes = Decoder(decoder.bytes_())
        header = BlockHeader.decode(header_bytes)
        header_bytes.expect_end()
        raw_coinbase = decoder.bytes_()
        coinbase = None
        if raw_coinbase:
            coinbase_decoder = Decoder(raw_coinbase)
            coinbase = CoinbaseTx.decode(coinbase_decoder)
            coinbase_decoder.expect_end()
        count = decoder.u64()
        if count > decoder.remaining():
            raise ChainFormatError(f"block claims {count} transactions in {decoder.remaining()} bytes")
        txs = tuple(EnergyTransaction.from_bytes(decoder.bytes_()) for _ in range(count))
        decoder.expect_end()
        return cls(header, coinbase, txs)


def merkle_root(tx_ids: Sequence[bytes]) -> bytes:
    """Pairwise SHA-256 tree over tx ids; odd levels duplicate their last node.

    Raises:
        EmptyBlock: on an empty list
    """
    if not tx_ids:
        raise EmptyBlock("merkle root of an empty transaction list")
    level = list(tx_ids)
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [sha256(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


def genesis_root(initial_balances: Dict[str, int]) -> bytes:
    leaves = [
        sha256(Encoder().text(address).u64(amount).getvalue())
        for address, amount in sorted(initial_balances.items())
    ]
    return merkle_root(leaves) if leaves else ZERO_HASH


def genesis_block(initial_balances: Dict[str, int], difficulty_bits: int) -> Block:
    header = BlockHeader(ZERO_HASH, genesis_root(initial_balances), 0, difficulty_bits, 0, "")
    return Block(header, None, ())


# ---------------------------------------------------------------------------
# Proof of work
# ---------------------------------------------------------------------------

def meets_difficulty(digest: bytes, difficulty_bits: int) -> bool:
    """True iff digest starts with difficulty_bits zero bits."""
    full, rest = divmod(difficulty_bits, 8)
    if any(digest[:full]):
        return False
    return rest == 0 or digest[full] >> (8 - rest) == 0


def search_nonce(header: BlockHeader, max_attempts: int, start_nonce: int) -> Tuple[int, int]:
    """Try nonces start_nonce, start_nonce+1, ... and return (nonce, attempts)."""
    base = hashlib.sha256(header._prefix())
    suffix = header._suffix()
    bits = header.difficulty_bits
    for attempt in range(max_attempts):
        nonce = (start_nonce + attempt) & _NONCE_MASK
        candidate = base.copy()
        candidate.update(nonce.to_bytes(8, "big") + suffix)
        if meets_difficulty(candidate.digest(), bits):
            return nonce, attempt + 1
    raise NonceNotFound(f"no nonce after {max_attempts} attempts at {bits} bits")


def mining_start(rng_seed: Union[int, Sequence[int]]) -> int:
    return int(np.random.default_rng(rng_seed).integers(0, 1 << 63))


def mine(
    header_template: BlockHeader,
    max_attempts: int = MAX_MINING_ATTEMPTS,
    rng_seed: Union[int, Sequence[int]] = 0,
) -> int:
    """Find a nonce sealing the header; the search order is fixed by rng_seed.

    Raises:
        NonceNotFound: after max_attempts (the caller reschedules)
    """
    nonce, attempts = search_nonce(header_template, max_attempts, mining_start(rng_seed))
    logger.debug(f"⛏️ Nonce {nonce} found after {attempts} attempts")
    return nonce


def race_winner(
    miners: Sequence[str],
    hash_power: Sequence[float],
    rng: np.random.Generator,
) -> Tuple[str, List[float]]:
    """Draw each miner's solve time from an exponential with rate = hash power."""
    if len(miners) != len(hash_power) or not miners:
        raise DomainError("need one positive hash power per miner")
    rates = np.asarray(hash_power, dtype=float)
    if np.any(rates <= 0.0):
        raise DomainError(f"hash power must be positive, got {list(hash_power)}")
    times = rng.exponential(1.0 / rates)
    return miners[int(np.argmin(times))], [float(t) for t in times]


# ---------------------------------------------------------------------------
# Validation and replay
# ---------------------------------------------------------------------------

class RejectReason(str, Enum):
    PREV_HASH_MISMATCH = "PrevHashMismatch"
    INVALID_POW = "InvalidProofOfWork"
    MERKLE_MISMATCH = "MerkleMismatch"
    INVALID_SIGNATURE = "InvalidSignature"
    MALFORMED_TX = "MalformedTx"
    DUPLICATE_TX = "DuplicateTx"
    NEGATIVE_BALANCE = "NegativeBalance"
    INVALID_COINBASE = "InvalidCoinbase"
    GENESIS_MISMATCH = "GenesisMismatch"


@dataclass(frozen=True)
class BlockRejection:
    reason: RejectReason
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.reason.value}: {self.detail}" if self.detail else self.reason.value


def _apply_block(balances: Dict[str, int], block: Block) -> None:
    if block.coinbase is not None:
        miner = block.coinbase.miner
        balances[miner] = balances.get(miner, 0) + block.coinbase.amount
    for tx in block.txs:
        remaining = balances.get(tx.buyer, 0) - tx.amount
        if remaining < 0:
            raise NegativeBalance(tx.tx_id, tx.buyer)
        balances[tx.buyer] = remaining
        balances[tx.seller] = balances.get(tx.seller, 0) + tx.amount


class Chain:
    """One APG's replica of the ledger, with replayed balances cached."""

    def __init__(
        self,
        difficulty_bits: int = DIFFICULTY_BITS,
        reward: int = MINING_REWARD,
        initial_balances: Optional[Dict[str, int]] = None,
        scheme_name: str = SIGNATURE_SCHEME,
    ):
        if not 0 <= difficulty_bits <= 256:
            raise DomainError(f"difficulty_bits={difficulty_bits} outside [0, 256]")
        self.difficulty_bits = difficulty_bits
        self.reward = reward
        self.initial_balances = dict(sorted((initial_balances or {}).items()))
        self.scheme_name = scheme_name
        self.scheme = get_scheme(scheme_name)
        self.blocks: List[Block] = [genesis_block(self.initial_balances, difficulty_bits)]
        self._tx_ids = set()
        self._balances = dict(self.initial_balances)

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    @property
    def tip_hash(self) -> bytes:
        return self.tip.digest()

    @property
    def height(self) -> int:
        return len(self.blocks) - 1

    def balances(self) -> Dict[str, int]:
        return dict(self._balances)

    def contains_tx(self, tx_id: bytes) -> bool:
        return tx_id in self._tx_ids

    def total_supply(self) -> int:
        return sum(self._balances.values())

    def _apply(self, block: Block) -> None:
        _apply_block(self._balances, block)
        self.blocks.append(block)
        self._tx_ids.update(tx.tx_id for tx in block.txs)

    def append(self, block: Block) -> None:
        """Validate and append a block.

        Raises:
            BlockRejected: with the first failed check
        """
        rejection = validate_block(self, block)
        if rejection is not None:
            raise BlockRejected(str(rejection))
        self._apply(block)

    def rollback(self, count: int = 1) -> List[Block]:
        """Drop the last `count` blocks (never genesis) and return them."""
        if not 0 < count <= self.height:
            raise DomainError(f"cannot roll back {count} block(s) from height {self.height}")
        removed = self.blocks[-count:]
        kept = self.blocks[1:-count]
        self.blocks = self.blocks[:1]
        self._tx_ids = set()
        self._balances = dict(self.initial_balances)
        for block in kept:
            self._apply(block)
        return removed

    def copy(self) -> "Chain":
        clone = Chain(self.difficulty_bits, self.reward, self.initial_balances, self.scheme_name)
        for block in self.blocks[1:]:
            clone._apply(block)
        return clone

    def to_bytes(self) -> bytes:
        encoder = Encoder().u64(self.difficulty_bits).u64(self.reward).text(self.scheme_name)
        encoder.u64(len(self.initial_balances))
        for address, amount in self.initial_balances.items():
            encoder.text(address).u64(amount)
        encoder.u64(len(self.blocks))
        for block in self.blocks:
            encoder.bytes_(block.to_bytes())
        return CHAIN_MAGIC + encoder.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Chain":
        """Parse and fully validate a chain dump.

        Raises:
            ChainFormatError: the bytes do not parse
            BlockRejected: a block fails validation
        """
        chain, blocks = parse_chain(data)
        failure = _verify_blocks(chain, blocks)
        if failure is not None:
            height, rejection = failure
            raise BlockRejected(f"block {height}: {rejection}")
        return chain


def validate_block(chain: Chain, block: Block) -> Optional[BlockRejection]:
    """Audit a block against the chain tip.

    Checks run in order: linkage, proof of work, merkle root, signatures and
    transaction form, duplicates, balances, coinbase. The first failure wins.
    """
    header = block.header
    if header.prev_hash != chain.tip_hash:
        return BlockRejection(RejectReason.PREV_HASH_MISMATCH, f"expected parent {chain.tip_hash.hex()[:16]}")
    if header.difficulty_bits != chain.difficulty_bits:
        return BlockRejection(RejectReason.INVALID_POW, f"difficulty {header.difficulty_bits} != {chain.difficulty_bits}")
    if not meets_difficulty(header.digest(), header.difficulty_bits):
        return BlockRejection(RejectReason.INVALID_POW, f"hash {header.digest().hex()[:16]} above target")

    ids = block.tx_ids()
    if not ids or merkle_root(ids) != header.merkle_root:
        return BlockRejection(RejectReason.MERKLE_MISMATCH, f"header root {header.merkle_root.hex()[:16]}")

    for tx in block.txs:
        try:
            verify_transaction(tx, chain.scheme)
        except SignatureInvalid as e:
            return BlockRejection(RejectReason.INVALID_SIGNATURE, str(e))
        except DomainError as e:
            return BlockRejection(RejectReason.MALFORMED_TX, str(e))

    seen = set()
    for tx in block.txs:
        tx_id = tx.tx_id
        if tx_id in seen or chain.contains_tx(tx_id):
            return BlockRejection(RejectReason.DUPLICATE_TX, tx_id.hex()[:16])
        seen.add(tx_id)

    try:
        _apply_block(chain.balances(), block)
    except NegativeBalance as e:
        return BlockRejection(RejectReason.NEGATIVE_BALANCE, str(e))

    coinbase = block.coinbase
    if coinbase is None:
        return BlockRejection(RejectReason.INVALID_COINBASE, "missing")
    if coinbase.amount != chain.reward:
        return BlockRejection(RejectReason.INVALID_COINBASE, f"amount {coinbase.amount} != {chain.reward}")
    if coinbase.miner != header.miner:
        return BlockRejection(RejectReason.INVALID_COINBASE, "miner differs from header")
    if coinbase.height != len(chain.blocks) or coinbase.timestamp != header.timestamp:
        return BlockRejection(RejectReason.INVALID_COINBASE, "height or timestamp differs")
    return None


def replay_balances(chain: Chain) -> Dict[str, int]:
    """Fold every coinbase and transaction over the initial balances.

    Raises:
        NegativeBalance: naming the offending tx if the chain was corrupted
    """
    balances = dict(chain.initial_balances)
    for block in chain.blocks[1:]:
        _apply_block(balances, block)
    return balances


def parse_chain(data: bytes) -> Tuple[Chain, List[Block]]:
    """Split a chain dump into an empty chain with its parameters and the blocks."""
    if not data.startswith(CHAIN_MAGIC):
        raise ChainFormatError("not a chain dump (bad magic)")
    decoder = Decoder(data, len(CHAIN_MAGIC))
    difficulty_bits, reward, scheme_name = decoder.u64(), decoder.u64(), decoder.text()
    count = decoder.u64()
    if count > decoder.remaining():
        raise ChainFormatError(f"{count} allocations cannot fit in {decoder.remaining()} bytes")
    allocations = {}
    for _ in range(count):
        address = decoder.text()
        allocations[address] = decoder.u64()
    block_count = decoder.u64()
    if block_count > decoder.remaining():
        raise ChainFormatError(f"{block_count} blocks cannot fit in {decoder.remaining()} bytes")
    blocks = [Block.from_bytes(decoder.bytes_()) for _ in range(block_count)]
    decoder.expect_end()
    if not blocks:
        raise ChainFormatError("chain dump holds no genesis block")
    try:
        chain = Chain(difficulty_bits, reward, allocations, scheme_name)
    except (DomainError, ValueError) as e:
        raise ChainFormatError(f"bad chain parameters: {e}") from e
    return chain, blocks


def _verify_blocks(chain: Chain, blocks: Sequence[Block]) -> Optional[Tuple[int, BlockRejection]]:
    if blocks[0] != chain.blocks[0]:
        return 0, BlockRejection(RejectReason.GENESIS_MISMATCH, "genesis does not match the allocations")
    for height, block in enumerate(blocks[1:], start=1):
        rejection = validate_block(chain, block)
        if rejection is not None:
            return height, rejection
        chain._apply(block)
    return None


def verify_chain_bytes(data: bytes) -> Optional[Tuple[int, BlockRejection]]:
    """Validate every block of a dump; (height, rejection) of the first failure.

    Raises:
        ChainFormatError: the bytes do not parse
    """
    chain, blocks = parse_chain(data)
    return _verify_blocks(chain, blocks)


# ---------------------------------------------------------------------------
# Consensus messages
# ---------------------------------------------------------------------------

class ChainKind(str, Enum):
    TX_ANNOUNCE = "TxAnnounce"
    PROPOSAL = "Proposal"
    VERDICT = "Verdict"
    REVERIFY = "Reverify"
    COMMIT = "Commit"
    DISCARD = "Discard"


@dataclass(frozen=True)
class ChainMessage:
    """Signed message between APGs."""

    kind: ChainKind
    sender: str
    nonce: int
    body: bytes
    signature: bytes = b""

    network = "chain"

    def signing_bytes(self) -> bytes:
        return Encoder().text(self.kind.value).text(self.sender).u64(self.nonce).bytes_(self.body).getvalue()

    def digest(self) -> bytes:
        return sha256(self.signing_bytes() + Encoder().bytes_(self.signature).getvalue())

    def tampered(self) -> "ChainMessage":
        body = bytearray(self.body)
        if body:
            body[len(body) // 2] ^= 0x01
            return replace(self, body=bytes(body))
        signature = bytearray(self.signature)
        signature[0] ^= 0x01
        return replace(self, signature=bytes(signature))


@dataclass(frozen=True)
class Verdict:
    block_hash: bytes
    approve: bool
    reason: str
    voter_height: int
    round: int

    def to_bytes(self) -> bytes:
        return (
            Encoder()
            .bytes_(self.block_hash)
            .u64(int(self.approve))
            .text(self.reason)
            .u64(self.voter_height)
            .u64(self.round)
            .getvalue()
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "Verdict":
        decoder = Decoder(data)
        verdict = cls(decoder.bytes_(), bool(decoder.u64()), decoder.text(), decoder.u64(), decoder.u64())
        decoder.expect_end()
        return verdict


@dataclass
class ConsensusOutcome:
    accepted: bool
    block_hash: str
    height: int
    proposer: str
    verification_rounds: int
    approvals: List[str] = field(default_factory=list)
    rejections: Dict[str, str] = field(default_factory=dict)
    messages: int = 0

    def to_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "block_hash": self.block_hash,
            "height": self.height,
            "proposer": self.proposer,
            "verification_rounds": self.verification_rounds,
            "approvals": list(self.approvals),
            "rejections": dict(sorted(self.rejections.items())),
            "messages": self.messages,
        }


def _encode_blocks(blocks: Sequence[Block]) -> bytes:
    encoder = Encoder().u64(len(blocks))
    for block in blocks:
        encoder.bytes_(block.to_bytes())
    return encoder.getvalue()


def _decode_blocks(decoder: Decoder) -> List[Block]:
    count = decoder.u64()
    if count > decoder.remaining():
        raise ChainFormatError(f"{count} blocks cannot fit in {decoder.remaining()} bytes")
    return [Block.from_bytes(decoder.bytes_()) for _ in range(count)]


class MemoryServer:
    """An APG's blockchain node: memory pool, chain replica and consensus roles."""

    def __init__(
        self,
        node_id: str,
        identity: Identity,
        chain: Chain,
        keys: KeyRegistry,
        quorum: str = QUORUM,
        timeout_ticks: int = RESPONSE_TIMEOUT_TICKS,
    ):
        if quorum not in QUORUM_RULES:
            raise DomainError(f"quorum must be one of {QUORUM_RULES}, got {quorum!r}")
        self.node_id = node_id
        self.identity = identity
        self.chain = chain
        self.keys = keys
        self.quorum = quorum
        self.timeout_ticks = timeout_ticks
        self.mempool: Dict[bytes, EnergyTransaction] = {}
        self.peers: List[str] = []
        self.rejected: List[RejectedMessage] = []
        self.peer_verdicts: Dict[str, Verdict] = {}
        self.outcome: Optional[ConsensusOutcome] = None
        self.loop: Optional[EventLoop] = None
        self._nonce = 0
        self._candidate: Optional[Block] = None
        self._leading = False
        self._round = 0
        self._token = 0
        self._votes: Dict[str, Verdict] = {}

    @property
    def address(self) -> str:
        return self.identity.wallet_address

    def attach(self, loop: EventLoop) -> None:
        self.loop = loop
        loop.register(self.node_id, self.handle, "chain")

    def _send(self, destination: str, kind: ChainKind, body: bytes) -> None:
        self._nonce += 1
        unsigned = ChainMessage(kind, self.address, self._nonce, body)
        signature = self.keys.scheme.sign(self.identity.private_key, unsigned.signing_bytes())
        self.loop.post(self.node_id, destination, replace(unsigned, signature=signature))

    def _broadcast(self, kind: ChainKind, body: bytes) -> None:
        for peer in self.peers:
            self._send(peer, kind, body)

    def _reject(self, msg: ChainMessage, reason: str) -> None:
        logger.warning(f"⚠️ {self.node_id} rejected {msg.kind.value} from {msg.sender[:10]}: {reason}")
        self.rejected.append(RejectedMessage(self.loop.now, self.node_id, msg.kind.value, msg.sender, reason))

    # Memory pool

    def add_transaction(self, tx: EnergyTransaction) -> bool:
        tx_id = tx.tx_id
        if tx_id in self.mempool or self.chain.contains_tx(tx_id):
            return False
        self.mempool[tx_id] = tx
        return True

    def announce(self, txs: Sequence[EnergyTransaction]) -> None:
        """Pool transactions locally and broadcast them to every other APG."""
        for tx in txs:
            self.add_transaction(tx)
        if txs:
            encoder = Encoder().u64(len(txs))
            for tx in txs:
                encoder.bytes_(tx.to_bytes())
            self._broadcast(ChainKind.TX_ANNOUNCE, encoder.getvalue())

    def _drop_committed(self, block: Block) -> None:
        for tx in block.txs:
            self.mempool.pop(tx.tx_id, None)

    # Leader

    def assemble_block(self, timestamp: int, nonce: int = 0) -> Block:
        """Block of every pooled transaction plus this APG's coinbase."""
        coinbase = CoinbaseTx(self.address, self.chain.reward, len(self.chain.blocks), timestamp)
        txs = tuple(self.mempool.values())
        ids = [coinbase.tx_id] + [tx.tx_id for tx in txs]
        header = BlockHeader(
            prev_hash=self.chain.tip_hash,
            merkle_root=merkle_root(ids),
            timestamp=timestamp,
            difficulty_bits=self.chain.difficulty_bits,
            nonce=nonce,
            miner=self.address,
        )
        return Block(header, coinbase, txs)

    def propose(self, block: Block) -> None:
        """Lead a consensus round for a sealed block."""
        self._candidate = block
        self._leading = True
        self._round = 1
        self._votes = {}
        self.outcome = None
        own = validate_block(self.chain, block)
        if own is not None:
            logger.error(f"❌ {self.node_id} proposes a block it rejects itself: {own}")
        logger.info(f"📦 {self.node_id} proposes block {block.digest().hex()[:16]} with {len(block.txs)} tx(s)")
        self._broadcast(ChainKind.PROPOSAL, block.to_bytes())
        self._arm_timer()
        if not self.peers:
            self._tally()

    def _arm_timer(self) -> None:
        self._token += 1
        token = self._token
        self.loop.call_later(self.node_id, self.timeout_ticks, f"verdicts#{token}", lambda: self._on_timeout(token))

    def _on_timeout(self, token: int) -> None:
        if token != self._token or not self._leading:
            return
        missing = [p for p in self.peers if p not in self._votes]
        logger.warning(f"⚠️ {self.node_id}: no verdict from {missing} in round {self._round}")
        self._tally()

    def _quorum_met(self, approvals: List[str]) -> bool:
        if self.quorum == "all":
            return len(approvals) == len(self.peers)
        return 2 * (len(approvals) + 1) > len(self.peers) + 1

    def _tally(self) -> None:
        block = self._candidate
        approvals = [p for p in self.peers if p in self._votes and self._votes[p].approve]
        rejections = {p: self._votes[p].reason if p in self._votes else "NoVerdict" for p in self.peers if p not in approvals}
        self._token += 1

        if self._quorum_met(approvals):
            own = validate_block(self.chain, block)
            if own is None:
                self._finish(True, approvals, rejections)
                self.chain.append(block)
                self._drop_committed(block)
                self._broadcast(ChainKind.COMMIT, block.to_bytes())
                logger.info(f"✅ Block {block.digest().hex()[:16]} accepted at height {self.chain.height}")
                return
            # The leader never commits a block its own replica rejects.
            rejections[self.node_id] = own.reason.value
            self._discard(approvals, rejections)
            return
        if self._round == 1:
            self._round = 2
            logger.info(f"🔄 {self.node_id}: re-verification for {sorted(rejections)}")
            for peer in sorted(rejections):
                known = self._votes.pop(peer, None)
                height = known.voter_height if known is not None else self.chain.height
                sync = self.chain.blocks[height + 1:] if height < self.chain.height else []
                body = Encoder().bytes_(block.to_bytes()).getvalue() + _encode_blocks(sync)
                self._send(peer, ChainKind.REVERIFY, body)
            self._arm_timer()
            return
        self._discard(approvals, rejections)

    def _discard(self, approvals: List[str], rejections: Dict[str, str]) -> None:
        block = self._candidate
        self._finish(False, approvals, rejections)
        self._candidate = None
        self._broadcast(ChainKind.DISCARD, block.digest())
        logger.warning(f"⚠️ Block {block.digest().hex()[:16]} discarded: {rejections}")

    def _finish(self, accepted: bool, approvals: List[str], rejections: Dict[str, str]) -> None:
        self._leading = False
        self.outcome = ConsensusOutcome(
            accepted=accepted,
            block_hash=self._candidate.digest().hex(),
            height=len(self.chain.blocks),
            proposer=self.node_id,
            verification_rounds=self._round,
            approvals=approvals,
            rejections=rejections,
        )

    # Every node

    def _vote(self, block: Block, round_: int) -> None:
        rejection = validate_block(self.chain, block)
        verdict = Verdict(
            block_hash=block.digest(),
            approve=rejection is None,
            reason="" if rejection is None else rejection.reason.value,
            voter_height=self.chain.height,
            round=round_,
        )
        if rejection is not None:
            logger.warning(f"⚠️ {self.node_id} rejects block {block.digest().hex()[:16]}: {rejection}")
        self._broadcast(ChainKind.VERDICT, verdict.to_bytes())

    def handle(self, event: Event) -> None:
        msg: ChainMessage = event.payload
        reason = self.keys.inspect(msg)
        if reason is not None:
            self._reject(msg, reason)
            return
        try:
            self._dispatch(event.source, msg)
        except ChainFormatError as e:
            self._reject(msg, f"Malformed: {e}")

    def _dispatch(self, source: str, msg: ChainMessage) -> None:
        if msg.kind is ChainKind.TX_ANNOUNCE:
            decoder = Decoder(msg.body)
            for _ in range(decoder.u64()):
                tx = EnergyTransaction.from_bytes(decoder.bytes_())
                try:
                    verify_transaction(tx, self.keys.scheme)
                except (SignatureInvalid, DomainError) as e:
                    self._reject(msg, f"InvalidTransaction: {e}")
                    continue
                self.add_transaction(tx)
        elif msg.kind is ChainKind.PROPOSAL:
            block = Block.from_bytes(msg.body)
            self._candidate = block
            self._vote(block, 1)
        elif msg.kind is ChainKind.VERDICT:
            verdict = Verdict.from_bytes(msg.body)
            self.peer_verdicts[source] = verdict
            if (
                self._leading
                and self._candidate is not None
                and verdict.block_hash == self._candidate.digest()
                and verdict.round == self._round
            ):
                self._votes[source] = verdict
                if all(p in self._votes for p in self.peers):
                    self._tally()
        elif msg.kind is ChainKind.REVERIFY:
            decoder = Decoder(msg.body)
            block = Block.from_bytes(decoder.bytes_())
            for missing in _decode_blocks(decoder):
                if missing.header.prev_hash == self.chain.tip_hash:
                    try:
                        self.chain.append(missing)
                        self._drop_committed(missing)
                        logger.info(f"🔄 {self.node_id} synced block at height {self.chain.height}")
                    except BlockRejected as e:
                        logger.warning(f"⚠️ {self.node_id} could not sync: {e}")
                        break
            self._candidate = block
            self._vote(block, 2)
        elif msg.kind is ChainKind.COMMIT:
            block = Block.from_bytes(msg.body)
            try:
                self.chain.append(block)
            except BlockRejected as e:
                logger.error(f"❌ {self.node_id} cannot commit block {block.digest().hex()[:16]}: {e}")
                return
            self._drop_committed(block)
            self._candidate = None
        elif msg.kind is ChainKind.DISCARD:
            self._candidate = None


def consensus_round(
    apg_nodes: Sequence[MemoryServer],
    candidate: Block,
    proposer: MemoryServer,
    loop: Optional[EventLoop] = None,
) -> ConsensusOutcome:
    """Run one leader-driven consensus round to completion.

    Args:
        apg_nodes: Every APG's memory server, proposer included
        candidate: The sealed block
        proposer: The APG that mined it
        loop: Shared event loop; a private one is created when omitted

    Returns:
        Accepted or rejected, with verdicts and the message count
    """
    if loop is None:
        loop = EventLoop()
        for node in apg_nodes:
            node.attach(loop)
    for node in apg_nodes:
        if not node.peers:
            node.peers = [other.node_id for other in apg_nodes if other is not node]
    start = len(loop.log)
    proposer.propose(candidate)
    loop.run_until_idle()
    outcome = proposer.outcome
    outcome.messages = loop.message_count("chain", since=start)
    return outcome
