"""IoE sub-system of one city.

Identities and wallets come from a trusted registry. The APG and its CCHPs then
run the trading contract over signed messages: energy requests and responses
(the bid sweep), trade start, wallet reveal, payment and record acknowledgement.
Settlement moves coins atomically in the city's account server.
"""
import decimal
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

from cchp_chain.config import (
    APG_INITIAL_BALANCE,
    MICRO_COINS_PER_COIN,
    RESPONSE_TIMEOUT_TICKS,
)
from cchp_chain.energy.cchp_model import CchpParams
from cchp_chain.energy.stackelberg_game import (
    City,
    EquilibriumResult,
    MarketParams,
    SolveMethod,
    base_profit,
    best_response,
    bid_schedule,
    profit_from_sold,
)
from cchp_chain.errors import (
    ChainFormatError,
    DomainError,
    DuplicateId,
    InsufficientFunds,
    SignatureInvalid,
)
from cchp_chain.services.codec import Decoder, Encoder, sha256
from cchp_chain.services.crypto import SignatureScheme, get_scheme, wallet_address
from cchp_chain.simulation.events import Event, EventLoop

logger = logging.getLogger("ioe_protocol")


# ---------------------------------------------------------------------------
# Identities and keys
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Identity:
    """What a registered entity receives from the registry."""

    entity_id: str
    public_key: bytes
    private_key: bytes = field(repr=False)
    certificate: bytes = field(repr=False)
    wallet_address: str


def certificate_bytes(entity_id: str, public_key: bytes) -> bytes:
    return Encoder().text(entity_id).bytes_(public_key).getvalue()


class KeyRegistry:
    """One node's view of the public keys plus the last nonce seen per sender."""

    def __init__(self, directory: Dict[str, bytes], scheme: SignatureScheme):
        self._directory = directory
        self.scheme = scheme
        self._last_nonce: Dict[str, int] = {}

    def public_key(self, address: str) -> Optional[bytes]:
        return self._directory.get(address)

    def last_nonce(self, address: str) -> int:
        return self._last_nonce.get(address, 0)

    def inspect(self, msg: "TradeMessage") -> Optional[str]:
        """Return why msg must be rejected, or None and record its nonce."""
        public_key = self.public_key(msg.sender)
        if public_key is None:
            return "UnknownSender"
        if not self.scheme.verify(public_key, msg.signing_bytes(), msg.signature):
            return "SignatureInvalid"
        if msg.nonce <= self.last_nonce(msg.sender):
            return "Replay"
        self._last_nonce[msg.sender] = msg.nonce
        return None


def verify_message(msg: "TradeMessage", key_registry: KeyRegistry) -> bool:
    """True iff the signature verifies and the nonce is fresh for its sender."""
    return key_registry.inspect(msg) is None


class Registry:
    """Trusted institution: issues keypairs, certificates and wallets."""

    def __init__(self, root_seed: bytes = b"cchp-chain/registry", scheme: Optional[SignatureScheme] = None):
        self.scheme = scheme or get_scheme()
        self._root_private, self.public_key = self.scheme.keypair(root_seed)
        self._seeds: set = set()
        self._ids: set = set()
        self.directory: Dict[str, bytes] = {}

    def register(
        self,
        entity_seed: bytes,
        entity_id: Optional[str] = None,
        account_server: Optional["AccountServer"] = None,
        initial_balance: int = 0,
    ) -> Identity:
        """Register an entity from its seed.

        Args:
            entity_seed: Secret seed; the keypair is derived from it
            entity_id: Registry handle (defaults to a hash of the seed)
            account_server: Where to open the entity's wallet, if anywhere
            initial_balance: Opening balance in micro-coins

        Returns:
            The new Identity

        Raises:
            DuplicateId: if the seed, id or derived address already exists
        """
        entity_id = entity_id or sha256(b"id/" + entity_seed).hex()[:16]
        if entity_seed in self._seeds or entity_id in self._ids:
            raise DuplicateId(f"entity {entity_id!r} is already registered")

        private_key, public_key = self.scheme.keypair(entity_seed)
        address = wallet_address(public_key)
        if address in self.directory:
            raise DuplicateId(f"wallet address {address} is already registered")

        certificate = self.scheme.sign(self._root_private, certificate_bytes(entity_id, public_key))
        self._seeds.add(entity_seed)
        self._ids.add(entity_id)
        self.directory[address] = public_key
        if account_server is not None:
            account_server.open_wallet(address, initial_balance)

        logger.debug(f"✅ Registered {entity_id} as {address}")
        return Identity(entity_id, public_key, private_key, certificate, address)

    def verify_certificate(self, identity: Identity) -> bool:
        data = certificate_bytes(identity.entity_id, identity.public_key)
        return self.scheme.verify(self.public_key, data, identity.certificate)

    def key_view(self) -> KeyRegistry:
        return KeyRegistry(self.directory, self.scheme)


# ---------------------------------------------------------------------------
# Wallets and the account server
# ---------------------------------------------------------------------------

@dataclass
class Wallet:
    address: str
    balance: int = 0


class AccountServer:
    """Single-writer ledger of one city's wallets and personal records."""

    def __init__(self, city_id: str):
        self.city_id = city_id
        self._wallets: Dict[str, Wallet] = {}
        self._records: Dict[str, List[bytes]] = {}

    def __contains__(self, address: str) -> bool:
        return address in self._wallets

    def open_wallet(self, address: str, balance: int = 0) -> Wallet:
        if balance < 0:
            raise DomainError(f"opening balance {balance} is negative")
        wallet = Wallet(address, balance)
        self._wallets[address] = wallet
        self._records[address] = []
        return wallet

    def balance(self, address: str) -> int:
        return self._wallets[address].balance

    def balances(self) -> Dict[str, int]:
        return {address: w.balance for address, w in self._wallets.items()}

    def total(self) -> int:
        return sum(w.balance for w in self._wallets.values())

    def snapshot(self) -> Dict[str, int]:
        return self.balances()

    def restore(self, snapshot: Dict[str, int]) -> None:
        for address, balance in snapshot.items():
            self._wallets[address].balance = balance

    def transfer(self, sender: str, recipient: str, amount: int) -> None:
        if amount < 0:
            raise DomainError(f"transfer amount {amount} is negative")
        source = self._wallets[sender]
        if source.balance < amount:
            raise InsufficientFunds(f"{sender} holds {source.balance}, needs {amount}")
        source.balance -= amount
        self._wallets[recipient].balance += amount

    def settle(self, txs: Sequence["EnergyTransaction"]) -> None:
        """Apply every payment or none of them."""
        snapshot = self.snapshot()
        try:
            for tx in txs:
                self.transfer(tx.buyer, tx.seller, tx.amount)
        except InsufficientFunds:
            self.restore(snapshot)
            raise
        for tx in txs:
            self._records[tx.buyer].append(tx.tx_id)
            self._records[tx.seller].append(tx.tx_id)

    def mint(self, address: str, amount: int) -> None:
        """Credit a mining reward."""
        self._wallets[address].balance += amount

    def personal_records(self, address: str) -> List[bytes]:
        return list(self._records.get(address, []))


# ---------------------------------------------------------------------------
# Energy transactions
# ---------------------------------------------------------------------------

def settlement_amount(energy: float, unit_price: float) -> int:
    """energy·unit_price in micro-coins, rounded half away from zero."""
    with decimal.localcontext() as ctx:
        ctx.prec = 80
        value = decimal.Decimal(energy) * decimal.Decimal(unit_price) * MICRO_COINS_PER_COIN
        return int(value.quantize(decimal.Decimal(1), rounding=decimal.ROUND_HALF_UP))


@dataclass(frozen=True)
class EnergyTransaction:
    """Energy sold by a CCHP to its APG, signed by both sides.

    The id and both signatures cover the body bytes only.
    """

    seller: str
    buyer: str
    seller_pubkey: bytes
    buyer_pubkey: bytes
    energy: float
    unit_price: float
    amount: int
    timestamp: int
    buyer_sig: bytes = b""
    seller_sig: bytes = b""

    def body_bytes(self) -> bytes:
        return (
            Encoder()
            .text(self.seller)
            .text(self.buyer)
            .bytes_(self.seller_pubkey)
            .bytes_(self.buyer_pubkey)
            .f64(self.energy)
            .f64(self.unit_price)
            .u64(self.amount)
            .u64(self.timestamp)
            .getvalue()
        )

    @property
    def tx_id(self) -> bytes:
        return sha256(self.body_bytes())

    def to_bytes(self) -> bytes:
        return Encoder().bytes_(self.body_bytes()).bytes_(self.buyer_sig).bytes_(self.seller_sig).getvalue()

    @classmethod
    def decode(cls, decoder: Decoder) -> "EnergyTransaction":
        body = Decoder(decoder.bytes_())
        fields = (
            body.text(),
            body.text(),
            body.bytes_(),
            body.bytes_(),
            body.f64(),
            body.f64(),
            body.u64(),
            body.u64(),
        )
        body.expect_end()
        return cls(*fields, buyer_sig=decoder.bytes_(), seller_sig=decoder.bytes_())

    @classmethod
    def from_bytes(cls, data: bytes) -> "EnergyTransaction":
        decoder = Decoder(data)
        tx = cls.decode(decoder)
        decoder.expect_end()
        return tx


def verify_transaction(tx: EnergyTransaction, scheme: SignatureScheme) -> None:
    """Re-verify a transaction from its public contents alone.

    Raises:
        SignatureInvalid: a signature fails or a key does not match its address
        DomainError: non-positive energy or an amount off the rounding formula
    """
    body = tx.body_bytes()
    for role, address, public_key, signature in (
        ("buyer", tx.buyer, tx.buyer_pubkey, tx.buyer_sig),
        ("seller", tx.seller, tx.seller_pubkey, tx.seller_sig),
    ):
        if wallet_address(public_key) != address:
            raise SignatureInvalid(f"{role} key does not derive {address}")
        if not scheme.verify(public_key, body, signature):
            raise SignatureInvalid(f"{role} signature on tx {tx.tx_id.hex()[:16]} fails")
    if not tx.energy > 0.0:
        raise DomainError(f"tx {tx.tx_id.hex()[:16]} sells energy={tx.energy}")
    if tx.amount != settlement_amount(tx.energy, tx.unit_price):
        raise DomainError(f"tx {tx.tx_id.hex()[:16]} amount {tx.amount} off the rounding formula")


# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------

class MessageKind(str, Enum):
    ENERGY_REQUEST = "EnergyRequest"
    RESPONSE = "Response"
    TRADE_START = "TradeStart"
    WALLET_REVEAL = "WalletReveal"
    PAYMENT = "Payment"
    RECORD_ACK = "RecordAck"


@dataclass(frozen=True)
class TradeMessage:
    """Signed IoE message. The signature covers every other field."""

    kind: MessageKind
    sender: str
    city: str
    nonce: int
    body: bytes
    signature: bytes = b""

    network = "ioe"

    def signing_bytes(self) -> bytes:
        return (
            Encoder()
            .text(self.kind.value)
            .text(self.sender)
            .text(self.city)
            .u64(self.nonce)
            .bytes_(self.body)
            .getvalue()
        )

    def to_bytes(self) -> bytes:
        return self.signing_bytes() + Encoder().bytes_(self.signature).getvalue()

    def digest(self) -> bytes:
        return sha256(self.to_bytes())

    def tampered(self) -> "TradeMessage":
        """Copy with one body byte flipped (the signature byte if no body)."""
        if self.body:
            body = bytearray(self.body)
            body[len(body) // 2] ^= 0x01
            return replace(self, body=bytes(body))
        signature = bytearray(self.signature)
        signature[0] ^= 0x01
        return replace(self, signature=bytes(signature))


@dataclass(frozen=True)
class RejectedMessage:
    tick: int
    node: str
    kind: str
    sender: str
    reason: str


def _bid_body(step: int, p_b: float) -> bytes:
    return Encoder().u64(step).f64(p_b).getvalue()


def _offer_body(step: int, energy: float) -> bytes:
    return Encoder().u64(step).f64(energy).getvalue()


def _read_step_value(body: bytes) -> Tuple[int, float]:
    decoder = Decoder(body)
    step, value = decoder.u64(), decoder.f64()
    decoder.expect_end()
    return step, value


def _trade_body(p_b: float, energy: float) -> bytes:
    return Encoder().f64(p_b).f64(energy).getvalue()


def _read_trade(body: bytes) -> Tuple[float, float]:
    decoder = Decoder(body)
    p_b, energy = decoder.f64(), decoder.f64()
    decoder.expect_end()
    return p_b, energy


# ---------------------------------------------------------------------------
# Nodes
# ---------------------------------------------------------------------------

class _IoeNode:
    """Signing, nonce bookkeeping and rejection logging shared by IoE nodes."""

    def __init__(self, node_id: str, identity: Identity, city_id: str, keys: KeyRegistry):
        self.node_id = node_id
        self.identity = identity
        self.city_id = city_id
        self.keys = keys
        self.loop: Optional[EventLoop] = None
        self.rejected: List[RejectedMessage] = []
        self._nonce = 0

    @property
    def address(self) -> str:
        return self.identity.wallet_address

    def attach(self, loop: EventLoop) -> None:
        self.loop = loop
        loop.register(self.node_id, self.handle, "ioe", self.city_id)

    def handle(self, event: Event) -> None:
        raise NotImplementedError

    def _send(self, destination: str, kind: MessageKind, body: bytes) -> None:
        self._nonce += 1
        unsigned = TradeMessage(kind, self.address, self.city_id, self._nonce, body)
        signature = self.keys.scheme.sign(self.identity.private_key, unsigned.signing_bytes())
        self.loop.post(self.node_id, destination, replace(unsigned, signature=signature))

    def _reject(self, msg: TradeMessage, reason: str) -> None:
        logger.warning(f"⚠️ {self.node_id} rejected {msg.kind.value} from {msg.sender[:10]}: {reason}")
        self.rejected.append(RejectedMessage(self.loop.now, self.node_id, msg.kind.value, msg.sender, reason))

    def _accept(self, event: Event) -> Optional[TradeMessage]:
        msg: TradeMessage = event.payload
        reason = self.keys.inspect(msg)
        if reason is not None:
            self._reject(msg, reason)
            return None
        return msg


class CchpAgent(_IoeNode):
    """A CCHP community's node: answers bids with its own best response."""

    def __init__(
        self,
        node_id: str,
        identity: Identity,
        city_id: str,
        params: CchpParams,
        market: MarketParams,
        keys: KeyRegistry,
    ):
        super().__init__(node_id, identity, city_id, keys)
        self.params = params
        self.market = market
        self.apg_address: Optional[str] = None
        self.apg_node: Optional[str] = None
        self.acked: List[EnergyTransaction] = []
        self._promised: Optional[Tuple[float, float]] = None

    def offer(self, p_b: float) -> float:
        """Energy sold at bid p_b, J/day."""
        beta = best_response(self.params, self.market, p_b)
        return self.params.capacity * (1.0 - beta)

    def handle(self, event: Event) -> None:
        msg = self._accept(event)
        if msg is None:
            return
        if msg.sender != self.apg_address:
            self._reject(msg, "UnexpectedSender")
            return
        try:
            if msg.kind is MessageKind.ENERGY_REQUEST:
                step, p_b = _read_step_value(msg.body)
                self._send(self.apg_node, MessageKind.RESPONSE, _offer_body(step, self.offer(p_b)))
            elif msg.kind is MessageKind.TRADE_START:
                p_b, _ = _read_trade(msg.body)
                self._promised = (p_b, self.offer(p_b))
                # Delivery is instantaneous; reveal the wallet for payment.
                self._send(self.apg_node, MessageKind.WALLET_REVEAL, Encoder().text(self.address).getvalue())
            elif msg.kind is MessageKind.PAYMENT:
                self._on_payment(msg)
            else:
                self._reject(msg, "UnexpectedKind")
        except (ChainFormatError, DomainError) as e:
            self._reject(msg, f"Malformed: {e}")

    def _on_payment(self, msg: TradeMessage) -> None:
        tx = EnergyTransaction.from_bytes(msg.body)
        scheme = self.keys.scheme
        if self._promised is None:
            self._reject(msg, "NoTradeStarted")
            return
        p_b, energy = self._promised
        if tx.seller != self.address or tx.buyer != self.apg_address:
            self._reject(msg, "WrongParties")
            return
        if tx.energy != energy or tx.unit_price != p_b:
            self._reject(msg, "TermsMismatch")
            return
        if wallet_address(tx.buyer_pubkey) != tx.buyer or not scheme.verify(
            tx.buyer_pubkey, tx.body_bytes(), tx.buyer_sig
        ):
            self._reject(msg, "SignatureInvalid")
            return
        if tx.amount != settlement_amount(tx.energy, tx.unit_price):
            self._reject(msg, "AmountMismatch")
            return

        signed = replace(tx, seller_sig=scheme.sign(self.identity.private_key, tx.body_bytes()))
        self._promised = None
        self.acked.append(signed)
        self._send(self.apg_node, MessageKind.RECORD_ACK, signed.to_bytes())


class RoundPhase(str, Enum):
    IDLE = "idle"
    BIDDING = "bidding"
    STARTING = "starting"
    PAYING = "paying"
    DONE = "done"
    ABORTED = "aborted"


class TransactionServer(_IoeNode):
    """The APG side of the trading contract.

    The bid sweep is replayed over messages; the leader keeps its own incumbent
    from the returned offers, exactly as the distributed solver does, and trades
    at that bid.
    """

    def __init__(
        self,
        node_id: str,
        identity: Identity,
        city_id: str,
        city: City,
        account_server: AccountServer,
        keys: KeyRegistry,
        timeout_ticks: int = RESPONSE_TIMEOUT_TICKS,
    ):
        super().__init__(node_id, identity, city_id, keys)
        self.city = city
        self.account_server = account_server
        self.timeout_ticks = timeout_ticks
        self.peers: List[Tuple[str, str]] = []
        self.phase = RoundPhase.IDLE
        self.error: Optional[Exception] = None
        self.settled: List[EnergyTransaction] = []
        self.trade_bid: Optional[float] = None
        self.trade_profit: Optional[float] = None

    def add_peer(self, node_id: str, address: str) -> None:
        self.peers.append((node_id, address))

    def _peer_index(self, event: Event, msg: Optional[TradeMessage] = None) -> Optional[int]:
        for i, (node_id, address) in enumerate(self.peers):
            if node_id == event.source and (msg is None or msg.sender == address):
                return i
        return None

    def start_round(self, equilibrium: EquilibriumResult, bids: Sequence[float]) -> None:
        """Begin a trading round that sweeps `bids` and then trades."""
        market = self.city.market
        self._equilibrium = equilibrium
        self._bids = [float(b) for b in bids]
        self._step = 0
        self._token = 0
        self._active = set(range(len(self.peers)))
        self._best_bid = market.p_m
        self._best_profit = base_profit(market)
        self._best_offers: Dict[int, float] = {}
        self._sellers: Dict[int, float] = {}
        self._revealed: Dict[int, str] = {}
        self._pending: Dict[int, EnergyTransaction] = {}
        self._acked: Dict[int, EnergyTransaction] = {}
        self.error = None
        self.settled = []
        self.phase = RoundPhase.BIDDING
        logger.info(f"🔄 {self.node_id}: trading round over {len(self._bids)} bid(s)")
        self._request_bid()

    def _arm_timer(self) -> None:
        self._token += 1
        token = self._token
        self.loop.call_later(
            self.node_id,
            self.timeout_ticks,
            f"{self.phase.value}#{token}",
            lambda: self._on_timeout(token),
        )

    def _on_timeout(self, token: int) -> None:
        if token != self._token:
            return
        if self.phase is RoundPhase.BIDDING:
            missing = sorted(self._active - set(self._offers))
            logger.warning(f"⚠️ {self.node_id}: no response from {missing} at step {self._step}")
            self._close_bid()
        elif self.phase is RoundPhase.STARTING:
            for i in sorted(set(self._sellers) - set(self._revealed)):
                logger.warning(f"⚠️ {self.node_id}: {self.peers[i][0]} never revealed its wallet")
                del self._sellers[i]
            self._pay()
        elif self.phase is RoundPhase.PAYING:
            for i in sorted(set(self._pending) - set(self._acked)):
                logger.warning(f"⚠️ {self.node_id}: {self.peers[i][0]} never acknowledged payment")
            self._settle()

    def _exclude(self, index: int) -> None:
        if index in self._active:
            logger.warning(f"⚠️ {self.node_id}: excluding {self.peers[index][0]} from this round")
            self._active.discard(index)
            self._sellers.pop(index, None)

    # Steps 1-3: bid sweep

    def _request_bid(self) -> None:
        self._offers: Dict[int, float] = {}
        body = _bid_body(self._step, self._bids[self._step])
        if not self._active:
            self.loop.call_later(self.node_id, 1, f"skip#{self._step}", self._close_bid)
            return
        for i in sorted(self._active):
            self._send(self.peers[i][0], MessageKind.ENERGY_REQUEST, body)
        self._arm_timer()

    def _close_bid(self) -> None:
        market = self.city.market
        p_b = self._bids[self._step]
        sold = sum(self._offers.get(i, 0.0) for i in range(len(self.peers)))
        profit = profit_from_sold(market, p_b, sold)
        if profit >= self._best_profit:
            self._best_bid, self._best_profit = p_b, profit
            self._best_offers = dict(self._offers)
        self._step += 1
        if self._step < len(self._bids):
            self._request_bid()
        else:
            self._start_trade()

    # Steps 3-4: trade start and wallet reveal

    def _start_trade(self) -> None:
        self.trade_bid, self.trade_profit = self._best_bid, self._best_profit
        if self.trade_bid != self._equilibrium.p_b_star:
            logger.warning(
                f"⚠️ {self.node_id}: protocol settled on p_b={self.trade_bid:.6e}, "
                f"equilibrium says {self._equilibrium.p_b_star:.6e}"
            )
        self._sellers = {
            i: energy for i, energy in sorted(self._best_offers.items()) if energy > 0.0 and i in self._active
        }
        if not self._sellers:
            logger.info(f"✅ {self.node_id}: no energy offered at p_b={self.trade_bid:.6e}")
            self.phase = RoundPhase.DONE
            return
        self.phase = RoundPhase.STARTING
        for i, energy in self._sellers.items():
            self._send(self.peers[i][0], MessageKind.TRADE_START, _trade_body(self.trade_bid, energy))
        self._arm_timer()

    # Step 5: payment

    def _pay(self) -> None:
        sellers = {i: e for i, e in self._sellers.items() if i in self._revealed}
        amounts = {i: settlement_amount(e, self.trade_bid) for i, e in sellers.items()}
        total = sum(amounts.values())
        available = self.account_server.balance(self.address)
        if total > available:
            self.error = InsufficientFunds(
                f"{self.node_id} owes {total} micro-coins but holds {available}"
            )
            logger.error(f"❌ {self.error} - round aborted")
            self.phase = RoundPhase.ABORTED
            return
        if not sellers:
            self.phase = RoundPhase.DONE
            return

        self.phase = RoundPhase.PAYING
        scheme = self.keys.scheme
        for i, energy in sellers.items():
            unsigned = EnergyTransaction(
                seller=self._revealed[i],
                buyer=self.address,
                seller_pubkey=self.keys.public_key(self._revealed[i]),
                buyer_pubkey=self.identity.public_key,
                energy=energy,
                unit_price=self.trade_bid,
                amount=amounts[i],
                timestamp=self.loop.now,
            )
            tx = replace(unsigned, buyer_sig=scheme.sign(self.identity.private_key, unsigned.body_bytes()))
            self._pending[i] = tx
            self._send(self.peers[i][0], MessageKind.PAYMENT, tx.to_bytes())
        self._arm_timer()

    # Step 6: recording

    def _settle(self) -> None:
        txs = [self._acked[i] for i in sorted(self._acked)]
        try:
            self.account_server.settle(txs)
        except InsufficientFunds as e:
            self.error = e
            logger.error(f"❌ {self.node_id}: settlement failed - {e}")
            self.phase = RoundPhase.ABORTED
            return
        self.settled = txs
        self.phase = RoundPhase.DONE
        paid = sum(tx.amount for tx in txs)
        logger.info(f"💸 {self.node_id}: settled {len(txs)} transaction(s), {paid} micro-coins")

    def handle(self, event: Event) -> None:
        msg: TradeMessage = event.payload
        index = self._peer_index(event)
        reason = self.keys.inspect(msg)
        if reason is not None:
            self._reject(msg, reason)
            if index is not None and reason == "SignatureInvalid":
                self._exclude(index)
                self._maybe_advance()
            return
        if index is None or self._peer_index(event, msg) is None:
            self._reject(msg, "UnexpectedSender")
            return
        try:
            if msg.kind is MessageKind.RESPONSE:
                step, energy = _read_step_value(msg.body)
                if self.phase is not RoundPhase.BIDDING or step != self._step or index not in self._active:
                    logger.info(f"{self.node_id}: late response from {event.source} for step {step}")
                    return
                self._offers[index] = energy
            elif msg.kind is MessageKind.WALLET_REVEAL:
                decoder = Decoder(msg.body)
                address = decoder.text()
                decoder.expect_end()
                if address != msg.sender:
                    self._reject(msg, "WalletMismatch")
                    return
                if self.phase is RoundPhase.STARTING and index in self._sellers:
                    self._revealed[index] = address
            elif msg.kind is MessageKind.RECORD_ACK:
                self._on_record_ack(index, msg)
            else:
                self._reject(msg, "UnexpectedKind")
                return
        except (ChainFormatError, DomainError) as e:
            self._reject(msg, f"Malformed: {e}")
            return
        self._maybe_advance()

    def _on_record_ack(self, index: int, msg: TradeMessage) -> None:
        if self.phase is not RoundPhase.PAYING or index not in self._pending:
            return
        tx = EnergyTransaction.from_bytes(msg.body)
        if tx.tx_id != self._pending[index].tx_id:
            self._reject(msg, "TxMismatch")
            return
        try:
            verify_transaction(tx, self.keys.scheme)
        except (SignatureInvalid, DomainError) as e:
            self._reject(msg, f"SignatureInvalid: {e}")
            return
        self._acked[index] = tx

    def _maybe_advance(self) -> None:
        if self.phase is RoundPhase.BIDDING and self._active <= set(self._offers):
            self._close_bid()
        elif self.phase is RoundPhase.STARTING and set(self._sellers) <= set(self._revealed):
            self._pay()
        elif self.phase is RoundPhase.PAYING and set(self._pending) & self._active <= set(self._acked):
            self._settle()


# ---------------------------------------------------------------------------
# City wiring and the trading round
# ---------------------------------------------------------------------------

@dataclass
class CityNodes:
    """Every IoE participant of one city."""

    city_id: str
    city: City
    account_server: AccountServer
    apg: TransactionServer
    agents: List[CchpAgent]

    @classmethod
    def build(
        cls,
        city_id: str,
        city: City,
        registry: Registry,
        seed_prefix: str = "",
        apg_initial_balance: int = APG_INITIAL_BALANCE,
        timeout_ticks: int = RESPONSE_TIMEOUT_TICKS,
    ) -> "CityNodes":
        """Register the APG and every CCHP of a city and wire them together."""
        account_server = AccountServer(city_id)
        apg_id = f"{city_id}/apg"
        apg_identity = registry.register(
            f"{seed_prefix}{apg_id}".encode("utf-8"),
            entity_id=apg_id,
            account_server=account_server,
            initial_balance=apg_initial_balance,
        )
        apg = TransactionServer(
            apg_id, apg_identity, city_id, city, account_server, registry.key_view(), timeout_ticks
        )
        agents = []
        for i, params in enumerate(city.cchps, start=1):
            node_id = f"{city_id}/cchp{i}"
            identity = registry.register(
                f"{seed_prefix}{node_id}".encode("utf-8"),
                entity_id=node_id,
                account_server=account_server,
            )
            agent = CchpAgent(node_id, identity, city_id, params, city.market, registry.key_view())
            agent.apg_address = apg.address
            agent.apg_node = apg_id
            apg.add_peer(node_id, identity.wallet_address)
            agents.append(agent)
        return cls(city_id, city, account_server, apg, agents)

    def attach(self, loop: EventLoop) -> None:
        self.apg.attach(loop)
        for agent in self.agents:
            agent.attach(loop)

    @property
    def rejected(self) -> List[RejectedMessage]:
        records = list(self.apg.rejected)
        for agent in self.agents:
            records.extend(agent.rejected)
        return sorted(records, key=lambda r: (r.tick, r.node))


def run_trading_round(
    city_nodes: CityNodes,
    equilibrium: EquilibriumResult,
    loop: Optional[EventLoop] = None,
) -> List[EnergyTransaction]:
    """Run the contract for one city and return the settled transactions.

    A distributed equilibrium is replayed bid by bid over its own sweep; a
    centralized one is offered at p_b* directly.

    Raises:
        InsufficientFunds: the APG could not cover the round; no balance changed
    """
    if loop is None:
        loop = EventLoop()
        city_nodes.attach(loop)
    market = city_nodes.city.market
    if equilibrium.method is SolveMethod.DISTRIBUTED:
        bids = list(bid_schedule(market, equilibrium.iterations))
    else:
        bids = [equilibrium.p_b_star]

    city_nodes.apg.start_round(equilibrium, bids)
    loop.run_until_idle()
    if city_nodes.apg.error is not None:
        raise city_nodes.apg.error
    return list(city_nodes.apg.settled)
