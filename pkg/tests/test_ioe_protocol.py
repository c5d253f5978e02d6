from dataclasses import replace

import pytest

from cchp_chain.energy.stackelberg_game import solve_centralized, solve_distributed
from cchp_chain.errors import DuplicateId, InsufficientFunds, IsolationViolation, SignatureInvalid
from cchp_chain.services.crypto import get_scheme
from cchp_chain.services.ioe_protocol import (
    AccountServer,
    CityNodes,
    MessageKind,
    Registry,
    TradeMessage,
    run_trading_round,
    settlement_amount,
    verify_message,
    verify_transaction,
)
from cchp_chain.simulation.events import EventLoop, FaultSpec

from conftest import make_city


@pytest.fixture
def registry():
    return Registry(root_seed=b"test-root", scheme=get_scheme("ed25519"))


def _signed(identity, scheme, nonce, body=b"\x01\x02", kind=MessageKind.ENERGY_REQUEST):
    unsigned = TradeMessage(kind, identity.wallet_address, "city1", nonce, body)
    return replace(unsigned, signature=scheme.sign(identity.private_key, unsigned.signing_bytes()))


# Registry and identities

def test_register_duplicate_seed_or_id(registry):
    registry.register(b"alice", entity_id="alice")
    with pytest.raises(DuplicateId):
        registry.register(b"alice", entity_id="alice-2")
    with pytest.raises(DuplicateId):
        registry.register(b"bob", entity_id="alice")


def test_certificate_verifies_under_registry_key(registry):
    identity = registry.register(b"carol")
    assert registry.verify_certificate(identity)
    forged = replace(identity, entity_id="mallory")
    assert not registry.verify_certificate(forged)


def test_registration_opens_wallet_with_balance(registry):
    accounts = AccountServer("city1")
    identity = registry.register(b"apg", account_server=accounts, initial_balance=1_000_000)
    assert accounts.balance(identity.wallet_address) == 1_000_000


def test_ten_thousand_registrations_have_distinct_addresses():
    registry = Registry(root_seed=b"bulk", scheme=get_scheme("keyed-hash"))
    addresses = {registry.register(f"seed-{i}".encode()).wallet_address for i in range(10_000)}
    assert len(addresses) == 10_000


# Message verification

def test_verify_message_accepts_then_rejects_replay(registry):
    identity = registry.register(b"sender")
    keys = registry.key_view()
    msg = _signed(identity, registry.scheme, nonce=1)
    assert verify_message(msg, keys)
    assert not verify_message(msg, keys)
    assert verify_message(_signed(identity, registry.scheme, nonce=2), keys)


def test_verify_message_rejects_wrong_key(registry):
    identity = registry.register(b"sender")
    other = registry.register(b"impostor")
    msg = _signed(identity, registry.scheme, nonce=1)
    forged = replace(msg, signature=registry.scheme.sign(other.private_key, msg.signing_bytes()))
    assert not verify_message(forged, registry.key_view())


def test_verify_message_rejects_tampered_body(registry):
    identity = registry.register(b"sender")
    msg = _signed(identity, registry.scheme, nonce=1)
    assert not verify_message(msg.tampered(), registry.key_view())


# Settlement amounts

def test_settlement_amount_rounds_half_away_from_zero():
    assert settlement_amount(1.0, 2.0**-7) == 7813
    assert settlement_amount(1.0, 2.0**-8) == 3906
    assert settlement_amount(0.0, 3e-8) == 0


def test_account_server_settle_is_atomic():
    accounts = AccountServer("city1")
    accounts.open_wallet("buyer", 100)
    accounts.open_wallet("a")
    accounts.open_wallet("b")
    with pytest.raises(InsufficientFunds):
        accounts.transfer("buyer", "a", 101)
    assert accounts.balances() == {"buyer": 100, "a": 0, "b": 0}


# Trading rounds

def _five_cchp_nodes(registry, city=None, balance=1_000_000_000):
    city = city or make_city([197.7069] * 5)
    return CityNodes.build("city1", city, registry, apg_initial_balance=balance)


def test_trading_round_settles_one_tx_per_seller(registry):
    nodes = _five_cchp_nodes(registry)
    equilibrium = solve_distributed(nodes.city, 100)
    before = nodes.account_server.balances()

    txs = run_trading_round(nodes, equilibrium)

    assert len(txs) == 5
    sold = equilibrium.sold_energies(nodes.city)
    for tx, energy, agent in zip(txs, sold, nodes.agents):
        assert tx.seller == agent.address
        assert tx.buyer == nodes.apg.address
        assert tx.energy == energy
        assert tx.energy == pytest.approx(3.90e9, rel=1e-2)
        assert tx.unit_price == equilibrium.p_b_star
        assert tx.amount == settlement_amount(tx.energy, tx.unit_price)
        verify_transaction(tx, registry.scheme)

    after = nodes.account_server.balances()
    paid = sum(tx.amount for tx in txs)
    assert before[nodes.apg.address] - after[nodes.apg.address] == paid
    assert sum(after.values()) == sum(before.values())
    for tx in txs:
        assert after[tx.seller] == tx.amount
        assert tx.tx_id in nodes.account_server.personal_records(tx.seller)
    assert nodes.apg.trade_bid == equilibrium.p_b_star


def test_trading_round_at_centralized_bid(registry):
    nodes = _five_cchp_nodes(registry)
    equilibrium = solve_centralized(nodes.city)
    txs = run_trading_round(nodes, equilibrium)
    assert len(txs) == 5
    assert {tx.unit_price for tx in txs} == {equilibrium.p_b_star}


def test_trading_round_without_sellers(registry):
    nodes = _five_cchp_nodes(registry, city=make_city([1e6, 1e6]))
    equilibrium = solve_distributed(nodes.city, 20)
    assert all(beta == 1.0 for beta in equilibrium.betas_star)
    assert run_trading_round(nodes, equilibrium) == []


def test_transactions_carry_no_registry_ids(registry):
    nodes = _five_cchp_nodes(registry)
    txs = run_trading_round(nodes, solve_distributed(nodes.city, 100))
    for tx in txs:
        raw = tx.to_bytes()
        assert b"city1/apg" not in raw
        assert b"cchp" not in raw


def test_tampered_response_excludes_that_cchp(registry):
    nodes = _five_cchp_nodes(registry)
    loop = EventLoop(faults=[FaultSpec("tamper", kind="Response", source="city1/cchp2")])
    nodes.attach(loop)

    txs = run_trading_round(nodes, solve_distributed(nodes.city, 100), loop)

    excluded = nodes.agents[1].address
    assert len(txs) == 4
    assert excluded not in {tx.seller for tx in txs}
    assert nodes.account_server.balance(excluded) == 0
    assert [r.reason for r in nodes.rejected] == ["SignatureInvalid"]


def test_replayed_payment_is_rejected_and_changes_nothing(registry):
    honest = _five_cchp_nodes(Registry(root_seed=b"test-root", scheme=get_scheme("ed25519")))
    equilibrium = solve_distributed(honest.city, 100)
    run_trading_round(honest, equilibrium)

    nodes = _five_cchp_nodes(registry)
    loop = EventLoop(faults=[FaultSpec("duplicate", kind="Payment", destination="city1/cchp1")])
    nodes.attach(loop)
    txs = run_trading_round(nodes, equilibrium, loop)

    assert len(txs) == 5
    assert any(r.reason == "Replay" and r.kind == "Payment" for r in nodes.rejected)
    assert nodes.account_server.balances() == honest.account_server.balances()


def test_insufficient_funds_aborts_without_moving_coins(registry):
    nodes = _five_cchp_nodes(registry, balance=1_000)
    before = nodes.account_server.balances()
    with pytest.raises(InsufficientFunds):
        run_trading_round(nodes, solve_distributed(nodes.city, 100))
    assert nodes.account_server.balances() == before


def test_tampered_transaction_fails_verification(registry):
    nodes = _five_cchp_nodes(registry)
    tx = run_trading_round(nodes, solve_distributed(nodes.city, 100))[0]
    with pytest.raises(SignatureInvalid):
        verify_transaction(replace(tx, amount=tx.amount + 1), registry.scheme)


def test_ioe_messages_stay_inside_their_city(registry):
    loop = EventLoop()
    first = CityNodes.build("city1", make_city([197.7069]), registry)
    second = CityNodes.build("city2", make_city([197.7069]), registry, seed_prefix="other:")
    first.attach(loop)
    second.attach(loop)
    msg = _signed(first.apg.identity, registry.scheme, nonce=1)
    with pytest.raises(IsolationViolation):
        loop.post(first.apg.node_id, second.agents[0].node_id, msg)
