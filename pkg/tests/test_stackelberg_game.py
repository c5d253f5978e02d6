from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from cchp_chain.energy.cchp_model import k1_range, utility
from cchp_chain.energy.stackelberg_game import (
    City,
    MarketParams,
    SolveMethod,
    apg_profit,
    base_profit,
    best_response,
    bid_schedule,
    optimal_bid_closed_form,
    profit_curve,
    profit_second_derivative,
    solve_centralized,
    solve_distributed,
    verify_se,
)
from cchp_chain.errors import DomainError, K1OutOfRange

from conftest import K1_REF, P_C, P_M, P_S, make_city, reference_cchp

STRIDE = (P_C - P_M) / 99


def _table_city(size: int, seed: int = 11) -> City:
    rng = np.random.default_rng(seed)
    low, high = k1_range(reference_cchp(), MarketParams(P_S, P_C, P_M, 1.0))
    return make_city(rng.uniform(low, high, size), r_load=30 * 3.6e7 * 200)


# Market and city validation

def test_market_requires_ordered_prices():
    with pytest.raises(DomainError):
        MarketParams(4e-8, 5.5e-8, 2e-8, 1e10)
    with pytest.raises(DomainError):
        MarketParams(P_S, P_C, 0.0, 1e10)


def test_city_load_must_cover_capacity(ref_cchp):
    with pytest.raises(DomainError):
        City(MarketParams(P_S, P_C, P_M, ref_cchp.capacity / 2), (ref_cchp,))


def test_city_k1_out_of_range_warns_or_raises(caplog):
    with caplog.at_level("WARNING"):
        make_city([300.0])
    assert "outside" in caplog.text
    with pytest.raises(K1OutOfRange):
        make_city([300.0], strict_k1=True)


# Followers

def test_best_response_bounds_of_k1_range(ref_cchp, market):
    k1_min, k1_max = k1_range(ref_cchp, market)
    assert best_response(replace(ref_cchp, k1=k1_max), market, P_M) == pytest.approx(1.0, abs=1e-4)
    assert best_response(replace(ref_cchp, k1=k1_min), market, P_C) == pytest.approx(0.0, abs=1e-4)


def test_best_response_reference_value(ref_cchp, market):
    assert best_response(ref_cchp, market, 2.64e-8) == pytest.approx(0.4581, abs=1e-4)


def test_best_response_is_utility_argmax():
    rng = np.random.default_rng(3)
    grid = np.linspace(0.0, 1.0, 1_000_001)
    for _ in range(50):
        params = reference_cchp(k1=float(rng.uniform(167.7, 227.7)))
        market = MarketParams(P_S, P_C, P_M, 1e10)
        p_b = float(rng.uniform(P_M, P_C))
        c, k1, b1 = params.capacity, params.k1, params.b1
        values = k1 * np.log1p(b1 * c * grid) + p_b * c * (1.0 - grid)
        assert best_response(params, market, p_b) == pytest.approx(grid[int(np.argmax(values))], abs=1e-5)


def test_best_response_nonincreasing_in_bid(ref_cchp, market):
    betas = [best_response(ref_cchp, market, float(p)) for p in np.linspace(P_M, P_C, 200)]
    assert all(a >= b for a, b in zip(betas, betas[1:]))


def test_best_response_rejects_bid_outside_market(ref_cchp, market):
    with pytest.raises(DomainError):
        best_response(ref_cchp, market, 5e-8)


# Leader profit

def test_base_profit_reference():
    market = MarketParams(P_S, P_C, P_M, 30 * 3.6e7 * 200)
    assert base_profit(market) == pytest.approx(3240.0, abs=1e-9)


def test_profit_at_cost_price_or_nothing_sold_is_base(five_cchp_city):
    base = base_profit(five_cchp_city.market)
    assert apg_profit(five_cchp_city, P_C, [0.3] * 5) == pytest.approx(base, abs=1e-9)
    assert apg_profit(five_cchp_city, 3e-8, [1.0] * 5) == pytest.approx(base, abs=1e-9)


def test_profit_sale_form_matches_cost_form(five_cchp_city):
    market = five_cchp_city.market
    betas = [0.2, 0.4, 0.5, 0.6, 0.9]
    sold = sum(c.capacity * (1 - b) for c, b in zip(five_cchp_city.cchps, betas))
    p_b = 3e-8
    sale_form = (market.p_s - p_b) * sold + (market.p_s - market.p_c) * (market.r_load - sold)
    assert apg_profit(five_cchp_city, p_b, betas) == pytest.approx(sale_form, rel=1e-12)


def test_apg_profit_validates_betas(five_cchp_city):
    with pytest.raises(DomainError):
        apg_profit(five_cchp_city, 3e-8, [0.5] * 4)
    with pytest.raises(DomainError):
        apg_profit(five_cchp_city, 3e-8, [0.5, 0.5, 0.5, 0.5, 1.5])


def test_profit_concave_in_bid(five_cchp_city):
    bids = np.linspace(P_M, P_C, 102)[1:-1]
    for p_b in bids:
        h = 1e-4 * p_b
        values = profit_curve(five_cchp_city, [p_b - h, p_b, p_b + h])
        numeric = (values[0] - 2 * values[1] + values[2]) / h**2
        analytic = profit_second_derivative(five_cchp_city, float(p_b))
        assert analytic < 0.0
        assert numeric == pytest.approx(analytic, rel=1e-4)


# Closed form and centralized solver

def test_closed_form_reference(single_city):
    market = single_city.market
    oracle = minimize_scalar(
        lambda p: -profit_curve(single_city, [p])[0],
        bounds=(market.p_m, market.p_c),
        method="bounded",
        options={"xatol": 1e-16},
    )
    p_b = optimal_bid_closed_form(single_city)
    assert p_b == pytest.approx(2.635e-8, abs=1e-11)
    assert p_b == pytest.approx(oracle.x, abs=1e-11)


def test_closed_form_is_homogeneous(single_city, five_cchp_city):
    assert optimal_bid_closed_form(five_cchp_city) == pytest.approx(optimal_bid_closed_form(single_city), rel=1e-12)


def test_closed_form_clamps():
    high = make_city([1e6])
    assert optimal_bid_closed_form(high) == P_C
    low = make_city([1e-6])
    assert optimal_bid_closed_form(low) == P_M
    assert solve_centralized(low).p_b_star == P_M


def test_centralized_single_city(single_city):
    result = solve_centralized(single_city)
    assert result.method is SolveMethod.CENTRALIZED
    assert result.p_b_star == pytest.approx(2.635e-8, abs=1e-11)
    assert result.profit_star > 1080.0
    assert len(result.trace) == 1


def test_centralized_profit_bracket():
    city = _table_city(5)
    market = city.market
    result = solve_centralized(city)
    assert 3240.0 <= result.profit_star <= (market.p_s - market.p_m) * market.r_load


# Distributed solver

def test_distributed_converges_to_reference_bid(five_cchp_city):
    result = solve_distributed(five_cchp_city, 100)
    assert result.method is SolveMethod.DISTRIBUTED
    assert result.iterations == 100
    assert len(result.trace) == 100
    assert result.p_b_star == pytest.approx(2.64e-8, abs=2e-10)
    assert result.p_b_star == pytest.approx(2.635e-8, abs=STRIDE)


def test_distributed_trace_profit_is_reproducible(five_cchp_city):
    result = solve_distributed(five_cchp_city, 100)
    for entry in result.trace:
        assert apg_profit(five_cchp_city, entry.p_b, entry.betas) == pytest.approx(entry.profit, rel=1e-12)
    best = max(result.trace, key=lambda e: (e.profit, e.iteration))
    assert result.p_b_star == best.p_b


def test_distributed_two_point_grid(five_cchp_city):
    result = solve_distributed(five_cchp_city, 2)
    assert result.p_b_star in (P_M, P_C)
    profits = {e.p_b: e.profit for e in result.trace}
    expected = P_C if profits[P_C] >= profits[P_M] else P_M
    assert result.p_b_star == expected


def test_distributed_rejects_single_iteration(five_cchp_city):
    with pytest.raises(DomainError):
        solve_distributed(five_cchp_city, 1)


def test_distributed_uses_followers_only():
    city = make_city([K1_REF] * 2)

    class FixedFollower:
        def __init__(self, beta):
            self.beta = beta
            self.calls = 0

        def respond(self, p_b):
            self.calls += 1
            return self.beta

    followers = [FixedFollower(0.5), FixedFollower(0.5)]
    result = solve_distributed(city, 10, followers)
    assert all(f.calls == 10 for f in followers)
    # A constant offer makes the lowest bid the most profitable.
    assert result.p_b_star == P_M


@pytest.mark.parametrize("iterations", [100, 1000, 10000])
def test_distributed_within_one_stride_of_centralized(five_cchp_city, iterations):
    stride = (P_C - P_M) / (iterations - 1)
    centralized = solve_centralized(five_cchp_city)
    distributed = solve_distributed(five_cchp_city, iterations)
    assert abs(distributed.p_b_star - centralized.p_b_star) <= stride


def test_table_property_distributed_close_to_centralized():
    increments = []
    for size in (5, 10, 15, 20, 25, 30):
        city = _table_city(30)
        city = City(city.market, city.cchps[:size])
        centralized = solve_centralized(city)
        distributed = solve_distributed(city, 100)
        assert distributed.profit_star <= centralized.profit_star + 1e-9
        gap = (centralized.profit_star - distributed.profit_star) / centralized.profit_star
        assert gap <= 1e-4
        increments.append(distributed.profit_star / base_profit(city.market))
    assert all(a < b for a, b in zip(increments, increments[1:]))


def test_argmax_bid_nondecreasing_in_k1():
    bids = bid_schedule(MarketParams(P_S, P_C, P_M, 1.0), 20001)
    low = make_city([190.0], r_load=1e11)
    high = make_city([200.0], r_load=1e11)
    assert bids[np.argmax(profit_curve(high, bids))] >= bids[np.argmax(profit_curve(low, bids))]


def test_profit_maximizers_form_one_run():
    rng = np.random.default_rng(17)
    for _ in range(10):
        city = make_city(rng.uniform(170.0, 225.0, 3))
        bids = bid_schedule(city.market, 100)
        profits = profit_curve(city, bids)
        top = np.flatnonzero(profits >= profits.max() - 1e-12)
        assert top.max() - top.min() <= 2
        assert np.all(np.diff(top) == 1)


# Equilibrium check

def test_verify_se_accepts_centralized(five_cchp_city):
    assert verify_se(five_cchp_city, solve_centralized(five_cchp_city), grid=1000, tol=1e-9)


def test_verify_se_accepts_distributed_on_its_own_grid(five_cchp_city):
    result = solve_distributed(five_cchp_city, 100)
    assert verify_se(five_cchp_city, result, grid=100, tol=1e-9)


def test_verify_se_rejects_perturbed_bid(five_cchp_city):
    result = solve_centralized(five_cchp_city)
    p_b = result.p_b_star + 5e-9
    betas = tuple(best_response(c, five_cchp_city.market, p_b) for c in five_cchp_city.cchps)
    perturbed = replace(
        result,
        p_b_star=p_b,
        betas_star=betas,
        utilities_star=tuple(utility(c, b, p_b) for c, b in zip(five_cchp_city.cchps, betas)),
    )
    assert not verify_se(five_cchp_city, perturbed, grid=1000, tol=1e-9)


def test_verify_se_rejects_follower_deviation(five_cchp_city):
    result = solve_centralized(five_cchp_city)
    deviated = replace(result, betas_star=(0.0,) + result.betas_star[1:])
    assert not verify_se(five_cchp_city, deviated, grid=1000, tol=1e-9)


def test_verify_se_defaults_to_the_sweep_grid(five_cchp_city):
    result = solve_distributed(five_cchp_city, 100)
    assert verify_se(five_cchp_city, result)
    assert verify_se(five_cchp_city, solve_centralized(five_cchp_city))


def test_verify_se_judges_the_bid_with_recomputed_best_responses(five_cchp_city):
    result = solve_centralized(five_cchp_city)
    # Within tol for every CCHP, but the stored betas sell less than the best responses.
    kept_more = replace(result, betas_star=tuple(b + 2e-6 for b in result.betas_star))
    assert verify_se(five_cchp_city, kept_more, grid=1000, tol=1e-9)


def test_empty_city_solvers_agree():
    city = City(MarketParams(P_S, P_C, P_M, 1e9), ())
    assert optimal_bid_closed_form(city) == P_C

    centralized = solve_centralized(city)
    distributed = solve_distributed(city, 100)
    assert centralized.p_b_star == distributed.p_b_star == pytest.approx(P_C)
    assert centralized.betas_star == distributed.betas_star == ()
    assert centralized.profit_star == pytest.approx(base_profit(city.market))
    assert distributed.profit_star == pytest.approx(base_profit(city.market))
    assert verify_se(city, centralized)
