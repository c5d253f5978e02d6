"""End-to-end scenario runs: equilibrium, trading, mining race and consensus."""
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from cchp_chain.config import (
    APG_INITIAL_BALANCE,
    DEFAULT_ITERATIONS,
    DIFFICULTY_BITS,
    MAX_MINING_ATTEMPTS,
    MINING_RETRIES,
    MINING_REWARD,
    QUORUM,
    RESPONSE_TIMEOUT_TICKS,
    SIGNATURE_SCHEME,
)
from cchp_chain.energy.stackelberg_game import City, EquilibriumResult, solve_distributed
from cchp_chain.errors import (
    CchpChainError,
    DomainError,
    InvariantViolation,
    NegativeBalance,
    NonceNotFound,
    SimulationError,
    UnknownTarget,
)
from cchp_chain.services.blockchain import (
    QUORUM_RULES,
    Block,
    Chain,
    ChainKind,
    ConsensusOutcome,
    MemoryServer,
    consensus_round,
    mine,
    race_winner,
    replay_balances,
)
from cchp_chain.services.codec import sha256
from cchp_chain.services.crypto import get_scheme
from cchp_chain.services.ioe_protocol import (
    CityNodes,
    EnergyTransaction,
    MessageKind,
    Registry,
    RejectedMessage,
    run_trading_round,
)
from cchp_chain.simulation.events import (
    FAULT_ACTIONS,
    EventLoop,
    EventRecord,
    FaultSpec,
    FixedLatency,
    UniformLatency,
)

logger = logging.getLogger("sim_harness")

MESSAGE_KINDS = {k.value for k in MessageKind} | {k.value for k in ChainKind}
_RACE_STREAM = 0xC4C4


@dataclass(frozen=True)
class LatencySpec:
    """fixed: every message takes `low` ticks; uniform: seeded draw in [low, high]."""

    mode: str = "fixed"
    low: int = 1
    high: int = 1

    def build(self, seed: int):
        if self.mode == "fixed":
            return FixedLatency(self.low)
        if self.mode == "uniform":
            return UniformLatency(self.low, self.high, seed)
        raise DomainError(f"unknown latency mode {self.mode!r}")


@dataclass(frozen=True)
class Scenario:
    """Everything a run needs; the seed fixes the whole run."""

    cities: List[City]
    difficulty_bits: int = DIFFICULTY_BITS
    reward: int = MINING_REWARD
    quorum: str = QUORUM
    hash_power: Optional[List[float]] = None
    iterations: int = DEFAULT_ITERATIONS
    rounds: int = 1
    latency: LatencySpec = LatencySpec()
    faults: List[FaultSpec] = field(default_factory=list)
    seed: int = 0
    apg_initial_balance: int = APG_INITIAL_BALANCE
    signature_scheme: str = SIGNATURE_SCHEME

    def __post_init__(self):
        if not self.cities:
            raise DomainError("a scenario needs at least one city")
        if self.seed < 0:
            raise DomainError(f"seed={self.seed} must be non-negative")
        if self.rounds < 1:
            raise DomainError(f"rounds={self.rounds} must be at least 1")
        if self.iterations < 2:
            raise DomainError(f"iterations={self.iterations} must be at least 2")
        if self.quorum not in QUORUM_RULES:
            raise DomainError(f"quorum must be one of {QUORUM_RULES}, got {self.quorum!r}")
        if not 0 <= self.difficulty_bits <= 256:
            raise DomainError(f"difficulty_bits={self.difficulty_bits} outside [0, 256]")
        if self.reward < 0 or self.apg_initial_balance < 0:
            raise DomainError("reward and initial balance must be non-negative")
        if self.hash_power is not None and (
            len(self.hash_power) != len(self.cities) or min(self.hash_power) <= 0
        ):
            raise DomainError("hash_power needs one positive entry per city")
        try:
            get_scheme(self.signature_scheme)
        except ValueError as e:
            raise DomainError(str(e)) from e
        self.latency.build(self.seed)

    @property
    def city_ids(self) -> List[str]:
        return [f"city{j}" for j in range(1, len(self.cities) + 1)]

    @property
    def apg_ids(self) -> List[str]:
        return [f"{c}/apg" for c in self.city_ids]

    @property
    def node_ids(self) -> List[str]:
        nodes = []
        for city_id, city in zip(self.city_ids, self.cities):
            nodes.append(f"{city_id}/apg")
            nodes.extend(f"{city_id}/cchp{i}" for i in range(1, len(city.cchps) + 1))
        return nodes


def inject_fault(scenario: Scenario, fault_spec: FaultSpec) -> Scenario:
    """Return a copy of the scenario whose run exhibits the fault.

    Raises:
        UnknownTarget: the fault names a node, kind, round or tick that does not exist
    """
    if fault_spec.action not in FAULT_ACTIONS:
        raise UnknownTarget(f"unknown fault action {fault_spec.action!r}")
    nodes = set(scenario.node_ids)
    for role in ("source", "destination", "node"):
        target = getattr(fault_spec, role)
        if target is not None and target not in nodes:
            raise UnknownTarget(f"fault {role} {target!r} is not a node of this scenario")
    if fault_spec.kind is not None and fault_spec.kind not in MESSAGE_KINDS:
        raise UnknownTarget(f"unknown message kind {fault_spec.kind!r}")
    if fault_spec.round is not None and not 1 <= fault_spec.round <= scenario.rounds:
        raise UnknownTarget(f"round {fault_spec.round} outside 1..{scenario.rounds}")
    if fault_spec.at_tick is not None and fault_spec.at_tick < 0:
        raise UnknownTarget(f"tick {fault_spec.at_tick} is negative")
    if fault_spec.occurrence < 1:
        raise UnknownTarget(f"occurrence {fault_spec.occurrence} must be at least 1")
    if fault_spec.action == "stale_tip":
        if fault_spec.node not in scenario.apg_ids:
            raise UnknownTarget(f"stale_tip needs an APG node, got {fault_spec.node!r}")
        if fault_spec.round is None or fault_spec.round < 2:
            raise UnknownTarget("stale_tip needs a round >= 2 so there is a block to roll back")
    return replace(scenario, faults=[*scenario.faults, fault_spec])


@dataclass
class RoundSummary:
    round: int
    transactions: Dict[str, int] = field(default_factory=dict)
    winner: Optional[str] = None
    race_times: List[float] = field(default_factory=list)
    consensus: Optional[ConsensusOutcome] = None

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "transactions": dict(self.transactions),
            "winner": self.winner,
            "race_times": list(self.race_times),
            "consensus": self.consensus.to_dict() if self.consensus else None,
        }


def _equilibrium_dict(result: EquilibriumResult) -> dict:
    return {
        "method": result.method.value,
        "iterations": result.iterations,
        "p_b_star": result.p_b_star,
        "betas_star": list(result.betas_star),
        "profit_star": result.profit_star,
        "utilities_star": list(result.utilities_star),
    }


@dataclass
class RunReport:
    """Everything a run produced. to_json() is byte-stable for a given scenario."""

    seed: int
    equilibria: Dict[str, EquilibriumResult]
    rounds: List[RoundSummary]
    chains: Dict[str, bytes]
    chain_length: int
    balances: Dict[str, int]
    event_log: List[EventRecord]
    rejected: List[RejectedMessage]
    invariant_failures: List[InvariantViolation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.invariant_failures

    @property
    def chain_bytes(self) -> bytes:
        return next(iter(self.chains.values()))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "equilibria": {c: _equilibrium_dict(r) for c, r in self.equilibria.items()},
            "rounds": [r.to_dict() for r in self.rounds],
            "chain_length": self.chain_length,
            "chain_hashes": {node: sha256(data).hex() for node, data in self.chains.items()},
            "balances": dict(sorted(self.balances.items())),
            "rejected_messages": [
                {"tick": r.tick, "node": r.node, "kind": r.kind, "sender": r.sender, "reason": r.reason}
                for r in self.rejected
            ],
            "invariant_failures": [str(v) for v in self.invariant_failures],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def event_log_text(self) -> str:
        return "".join(record.to_line() + "\n" for record in self.event_log)


def _seal(server: MemoryServer, timestamp: int, seed: int, round_: int) -> Block:
    block = server.assemble_block(timestamp)
    for attempt in range(MINING_RETRIES):
        try:
            nonce = mine(block.header, MAX_MINING_ATTEMPTS, rng_seed=[seed, round_, attempt])
        except NonceNotFound as e:
            logger.warning(f"⚠️ {server.node_id}: {e}; rescheduling")
            continue
        logger.info(f"⛏️ {server.node_id} sealed a block with nonce {nonce}")
        return replace(block, header=replace(block.header, nonce=nonce))
    raise SimulationError(f"mining failed {MINING_RETRIES} times", timestamp, server.node_id)


def check_invariants(
    servers: List[MemoryServer],
    cities: Dict[str, CityNodes],
    initial_supply: int,
    expect_drained: bool,
) -> List[InvariantViolation]:
    """Check replica equality, ledger/account agreement, supply and mempools."""
    failures = []
    dumps = {s.node_id: s.chain.to_bytes() for s in servers}
    if len(set(dumps.values())) > 1:
        heights = {s.node_id: s.chain.height for s in servers}
        failures.append(InvariantViolation("ChainsIdentical", f"replicas differ, heights {heights}"))

    reference = servers[0]
    try:
        expected = replay_balances(reference.chain)
    except NegativeBalance as e:
        failures.append(InvariantViolation("ReplayNonNegative", str(e)))
        return failures

    supply = sum(expected.values())
    minted = reference.chain.reward * reference.chain.height
    if supply != initial_supply + minted:
        failures.append(
            InvariantViolation("CoinConservation", f"supply {supply} != {initial_supply} + {minted}")
        )

    # Settled but not yet committed payments are already in the account servers.
    pending: Dict[bytes, EnergyTransaction] = {}
    for server in servers:
        for tx_id, tx in server.mempool.items():
            if not reference.chain.contains_tx(tx_id):
                pending[tx_id] = tx
    for tx in pending.values():
        expected[tx.buyer] = expected.get(tx.buyer, 0) - tx.amount
        expected[tx.seller] = expected.get(tx.seller, 0) + tx.amount
    accounts: Dict[str, int] = {}
    for nodes in cities.values():
        accounts.update(nodes.account_server.balances())
    for address in sorted(set(accounts) | set(expected)):
        if accounts.get(address, 0) != expected.get(address, 0):
            failures.append(
                InvariantViolation(
                    "LedgerMatchesAccounts",
                    f"{address}: account {accounts.get(address, 0)} != ledger {expected.get(address, 0)}",
                )
            )
            break

    if expect_drained and any(s.mempool for s in servers):
        pending = {s.node_id: len(s.mempool) for s in servers if s.mempool}
        failures.append(InvariantViolation("MempoolsDrained", f"pending {pending}"))
    return failures


def run(scenario: Scenario) -> RunReport:
    """Execute a scenario end to end.

    Each round every city trades at its equilibrium, the APGs pool and announce
    the transactions, the mining race picks a leader who seals a block, and the
    leader runs consensus.

    Raises:
        SimulationError: a module error, annotated with the tick and node
    """
    faults = [replace(f) for f in scenario.faults]
    loop = EventLoop(latency=scenario.latency.build(scenario.seed), faults=faults)
    scheme = get_scheme(scenario.signature_scheme)
    registry = Registry(root_seed=f"{scenario.seed}:registry".encode("utf-8"), scheme=scheme)
    timeout = max(RESPONSE_TIMEOUT_TICKS, 2 * loop.latency.max_ticks + 2)

    cities: Dict[str, CityNodes] = {}
    for city_id, city in zip(scenario.city_ids, scenario.cities):
        nodes = CityNodes.build(
            city_id,
            city,
            registry,
            seed_prefix=f"{scenario.seed}:",
            apg_initial_balance=scenario.apg_initial_balance,
            timeout_ticks=timeout,
        )
        nodes.attach(loop)
        cities[city_id] = nodes

    initial: Dict[str, int] = {}
    for nodes in cities.values():
        initial.update(nodes.account_server.balances())
    initial_supply = sum(initial.values())

    servers: List[MemoryServer] = []
    for nodes in cities.values():
        chain = Chain(scenario.difficulty_bits, scenario.reward, initial, scenario.signature_scheme)
        server = MemoryServer(
            nodes.apg.node_id, nodes.apg.identity, chain, registry.key_view(), scenario.quorum, timeout
        )
        server.attach(loop)
        servers.append(server)
    for server in servers:
        server.peers = [other.node_id for other in servers if other is not server]
    by_id = {s.node_id: s for s in servers}
    city_of_apg = {nodes.apg.node_id: nodes for nodes in cities.values()}

    equilibria = {city_id: solve_distributed(nodes.city, scenario.iterations) for city_id, nodes in cities.items()}
    hash_power = scenario.hash_power or [1.0] * len(servers)
    race_rng = np.random.default_rng([scenario.seed, _RACE_STREAM])

    summaries = []
    for round_ in range(1, scenario.rounds + 1):
        loop.current_round = round_
        summary = RoundSummary(round_)
        logger.info(f"🔄 Round {round_}/{scenario.rounds}")

        for (city_id, nodes), server in zip(cities.items(), servers):
            try:
                txs = run_trading_round(nodes, equilibria[city_id], loop)
            except CchpChainError as e:
                raise SimulationError(str(e), loop.now, nodes.apg.node_id) from e
            summary.transactions[city_id] = len(txs)
            server.announce(txs)
        loop.run_until_idle()

        if any(s.mempool for s in servers):
            winner_id, times = race_winner([s.node_id for s in servers], hash_power, race_rng)
            winner = by_id[winner_id]
            summary.winner, summary.race_times = winner_id, times
            candidate = _seal(winner, loop.now, scenario.seed, round_)

            for fault in faults:
                if fault.action != "stale_tip" or fault.round != round_:
                    continue
                if fault.node == winner_id:
                    logger.warning(f"⚠️ Skipping stale tip on {fault.node}: it mined this round")
                    continue
                by_id[fault.node].chain.rollback(1)
                logger.warning(f"⚠️ Fault stale_tip: {fault.node} rolled back to height {by_id[fault.node].chain.height}")

            outcome = consensus_round(servers, candidate, winner, loop)
            summary.consensus = outcome
            if outcome.accepted:
                city_of_apg[winner_id].account_server.mint(winner.address, scenario.reward)
        else:
            logger.info(f"✅ Round {round_}: nothing to record")
        summaries.append(summary)

    rejected = []
    for nodes in cities.values():
        rejected.extend(nodes.rejected)
    for server in servers:
        rejected.extend(server.rejected)
    rejected.sort(key=lambda r: (r.tick, r.node, r.kind))

    failures = check_invariants(servers, cities, initial_supply, expect_drained=not scenario.faults)
    for failure in failures:
        logger.error(f"❌ Invariant violated - {failure}")

    balances: Dict[str, int] = {}
    for nodes in cities.values():
        balances.update(nodes.account_server.balances())

    return RunReport(
        seed=scenario.seed,
        equilibria=equilibria,
        rounds=summaries,
        chains={s.node_id: s.chain.to_bytes() for s in servers},
        chain_length=len(servers[0].chain),
        balances=balances,
        event_log=list(loop.log),
        rejected=rejected,
        invariant_failures=failures,
    )
