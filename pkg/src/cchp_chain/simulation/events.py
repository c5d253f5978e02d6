"""Deterministic discrete-event message bus shared by every simulated node."""
import hashlib
import heapq
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from cchp_chain.errors import DomainError, IsolationViolation

logger = logging.getLogger("events")

Handler = Callable[["Event"], None]

FAULT_ACTIONS = ("drop", "duplicate", "tamper", "delay", "stale_tip")


@dataclass(order=True)
class Event:
    """A payload in flight. Ordered by (deliver_at, seq), which is total."""

    deliver_at: int
    seq: int
    source: str = field(compare=False)
    destination: str = field(compare=False)
    payload: Any = field(compare=False)


@dataclass(frozen=True)
class EventRecord:
    tick: int
    seq: int
    source: str
    destination: str
    kind: str
    payload_hash: str
    status: str
    network: str = "timer"

    def to_line(self) -> str:
        return json.dumps(
            {
                "tick": self.tick,
                "seq": self.seq,
                "src": self.source,
                "dst": self.destination,
                "kind": self.kind,
                "payload_hash": self.payload_hash,
                "status": self.status,
                "network": self.network,
            },
            sort_keys=True,
        )


@dataclass(frozen=True)
class Timer:
    label: str
    callback: Callable[[], None]
    network: str = "timer"

    @property
    def kind(self) -> str:
        return f"Timer:{self.label}"

    def digest(self) -> bytes:
        return hashlib.sha256(self.label.encode("utf-8")).digest()


class FixedLatency:
    def __init__(self, ticks: int = 1):
        if ticks < 1:
            raise DomainError(f"latency must be at least 1 tick, got {ticks}")
        self.ticks = ticks

    @property
    def max_ticks(self) -> int:
        return self.ticks

    def sample(self) -> int:
        return self.ticks


class UniformLatency:
    """Seeded integer delays drawn uniformly from [low, high]."""

    def __init__(self, low: int, high: int, seed: int):
        if not 1 <= low <= high:
            raise DomainError(f"uniform latency needs 1 <= low <= high, got [{low}, {high}]")
        self.low = low
        self.high = high
        self._rng = np.random.default_rng(seed)

    @property
    def max_ticks(self) -> int:
        return self.high

    def sample(self) -> int:
        return int(self._rng.integers(self.low, self.high + 1))


@dataclass
class FaultSpec:
    """A scripted fault.

    Message faults (drop, duplicate, tamper, delay) hit the `occurrence`-th
    message matching every given filter. stale_tip rolls `node`'s chain back
    one block before consensus in `round`.
    """

    action: str
    kind: Optional[str] = None
    source: Optional[str] = None
    destination: Optional[str] = None
    node: Optional[str] = None
    round: Optional[int] = None
    at_tick: Optional[int] = None
    occurrence: int = 1
    delay_ticks: int = 0
    _seen: int = field(default=0, init=False, repr=False, compare=False)
    _fired: bool = field(default=False, init=False, repr=False, compare=False)

    @property
    def is_message_fault(self) -> bool:
        return self.action != "stale_tip"

    def matches(self, event: Event, current_round: Optional[int], now: int) -> bool:
        if self._fired or not self.is_message_fault:
            return False
        if self.kind is not None and payload_kind(event.payload) != self.kind:
            return False
        if self.source is not None and event.source != self.source:
            return False
        if self.destination is not None and event.destination != self.destination:
            return False
        if self.round is not None and current_round != self.round:
            return False
        if self.at_tick is not None and now < self.at_tick:
            return False
        self._seen += 1
        if self._seen == self.occurrence:
            self._fired = True
            return True
        return False

    @property
    def fired(self) -> bool:
        return self._fired


def payload_kind(payload: Any) -> str:
    kind = getattr(payload, "kind", type(payload).__name__)
    return getattr(kind, "value", kind)


def payload_hash(payload: Any) -> str:
    return payload.digest().hex()[:16]


class EventLoop:
    """Single-threaded scheduler with per-city isolation of IoE traffic.

    Nodes register a handler per network ("ioe" or "chain"); a payload is
    routed by its `network` attribute.

    Each (source, destination) channel is FIFO: a message never overtakes one
    sent earlier on the same channel.
    """

    def __init__(self, latency=None, faults: Optional[List[FaultSpec]] = None):
        self.latency = latency or FixedLatency(1)
        self.faults = [f for f in (faults or []) if f.is_message_fault]
        self.now = 0
        self.current_round: Optional[int] = None
        self._seq = 0
        self._queue: List[Tuple[int, int, Event]] = []
        self._handlers: Dict[Tuple[str, str], Handler] = {}
        self._cities: Dict[str, Optional[str]] = {}
        self._channel_tail: Dict[Tuple[str, str], int] = {}
        self.log: List[EventRecord] = []

    def register(self, node_id: str, handler: Handler, network: str, city: Optional[str] = None) -> None:
        self._handlers[(node_id, network)] = handler
        if city is not None or node_id not in self._cities:
            self._cities[node_id] = city

    def city_of(self, node_id: str) -> Optional[str]:
        return self._cities.get(node_id)

    @property
    def node_ids(self) -> List[str]:
        return sorted(self._cities)

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def _record(self, event: Event, status: str, tick: Optional[int] = None) -> None:
        self.log.append(
            EventRecord(
                tick=self.now if tick is None else tick,
                seq=event.seq,
                source=event.source,
                destination=event.destination,
                kind=payload_kind(event.payload),
                payload_hash=payload_hash(event.payload),
                status=status,
                network=getattr(event.payload, "network", "timer"),
            )
        )

    def _push(self, event: Event) -> None:
        heapq.heappush(self._queue, (event.deliver_at, event.seq, event))

    def _check_isolation(self, source: str, destination: str, payload: Any) -> None:
        if getattr(payload, "network", None) != "ioe":
            return
        src_city, dst_city = self.city_of(source), self.city_of(destination)
        msg_city = getattr(payload, "city", None)
        if src_city != dst_city or (msg_city is not None and msg_city != dst_city):
            raise IsolationViolation(
                f"{payload_kind(payload)} from {source} ({src_city}) to "
                f"{destination} ({dst_city}) crosses a city boundary"
            )

    def post(self, source: str, destination: str, payload: Any) -> None:
        """Send a payload; it is delivered after the latency model's delay."""
        if destination not in self._cities:
            raise DomainError(f"unknown destination node {destination!r}")
        self._check_isolation(source, destination, payload)
        event = Event(self.now + self.latency.sample(), self._next_seq(), source, destination, payload)

        duplicate = False
        for fault in self.faults:
            if not fault.matches(event, self.current_round, self.now):
                continue
            logger.warning(f"⚠️ Fault {fault.action} on {payload_kind(payload)} {source} -> {destination}")
            if fault.action == "drop":
                self._record(event, "dropped")
                return
            if fault.action == "tamper":
                event.payload = payload.tampered()
                self._record(event, "tampered")
            elif fault.action == "delay":
                event.deliver_at += fault.delay_ticks
                self._record(event, "delayed")
            elif fault.action == "duplicate":
                duplicate = True

        channel = (source, destination)
        event.deliver_at = max(event.deliver_at, self._channel_tail.get(channel, 0))
        self._channel_tail[channel] = event.deliver_at
        self._push(event)
        if duplicate:
            copy = Event(event.deliver_at, self._next_seq(), source, destination, event.payload)
            self._record(copy, "duplicated")
            self._push(copy)

    def call_later(self, node_id: str, delay: int, label: str, callback: Callable[[], None]) -> None:
        timer = Timer(label, callback)
        self._push(Event(self.now + delay, self._next_seq(), node_id, node_id, timer))

    def run_until_idle(self, max_events: int = 10_000_000) -> int:
        """Deliver events in order until the queue drains. Returns the count."""
        delivered = 0
        while self._queue:
            deliver_at, _, event = heapq.heappop(self._queue)
            self.now = deliver_at
            payload = event.payload
            self._record(event, "delivered")
            if isinstance(payload, Timer):
                payload.callback()
            else:
                handler = self._handlers.get((event.destination, payload.network))
                if handler is None:
                    raise DomainError(
                        f"node {event.destination!r} has no {payload.network} handler"
                    )
                handler(event)
            delivered += 1
            if delivered >= max_events:
                raise DomainError(f"event budget of {max_events} exhausted at tick {self.now}")
        return delivered

    def message_count(self, network: str, since: int = 0) -> int:
        """Delivered messages of a network in the log from index `since`."""
        count = 0
        for record in self.log[since:]:
            if record.status == "delivered" and record.network == network:
                count += 1
        return count
