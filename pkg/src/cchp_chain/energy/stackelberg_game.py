"""Leader-follower trading game between the APG and the CCHPs of one city."""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np

from cchp_chain.config import DEFAULT_ITERATIONS
from cchp_chain.energy.cchp_model import CchpParams, k1_range, utility
from cchp_chain.errors import DomainError, K1OutOfRange

logger = logging.getLogger("stackelberg_game")


@dataclass(frozen=True)
class MarketParams:
    """APG-side prices (coin/J) and daily electric load (J/day)."""

    p_s: float
    p_c: float
    p_m: float
    r_load: float

    def __post_init__(self):
        if not 0.0 < self.p_m < self.p_c < self.p_s:
            raise DomainError(
                f"prices must satisfy 0 < p_m < p_c < p_s, got "
                f"p_m={self.p_m}, p_c={self.p_c}, p_s={self.p_s}"
            )
        if self.r_load < 0.0:
            raise DomainError(f"r_load={self.r_load} must be non-negative")


@dataclass(frozen=True)
class City:
    """The APG's market and its ordered set of CCHPs.

    k1 values outside their valid range are logged as warnings, or rejected
    when strict_k1 is set. Prices with p_c > e·p_m always raise.
    """

    market: MarketParams
    cchps: Tuple[CchpParams, ...]
    strict_k1: bool = False

    def __post_init__(self):
        object.__setattr__(self, "cchps", tuple(self.cchps))
        capacity = sum(c.capacity for c in self.cchps)
        if self.market.r_load < capacity:
            raise DomainError(
                f"r_load={self.market.r_load:.6g} J is below the CCHPs' total "
                f"capacity {capacity:.6g} J"
            )
        for i, cchp in enumerate(self.cchps):
            k1_min, k1_max = k1_range(cchp, self.market)
            if not k1_min <= cchp.k1 <= k1_max:
                message = f"CCHP {i}: k1={cchp.k1} outside [{k1_min:.4f}, {k1_max:.4f}]"
                if self.strict_k1:
                    raise K1OutOfRange(message)
                logger.warning(f"⚠️ {message} - best responses will be clamped")

    @property
    def total_capacity(self) -> float:
        return sum(c.capacity for c in self.cchps)


class SolveMethod(str, Enum):
    CENTRALIZED = "centralized"
    DISTRIBUTED = "distributed"


@dataclass(frozen=True)
class TraceEntry:
    """One leader iteration: the bid, the followers' answers and the profit."""

    iteration: int
    p_b: float
    betas: Tuple[float, ...]
    profit: float


@dataclass(frozen=True)
class EquilibriumResult:
    """A solved game: (p_b*, {beta*}) with profits, utilities and the trace."""

    p_b_star: float
    betas_star: Tuple[float, ...]
    profit_star: float
    utilities_star: Tuple[float, ...]
    trace: Tuple[TraceEntry, ...]
    method: SolveMethod
    iterations: int = 1

    def sold_energies(self, city: City) -> List[float]:
        """Energy each CCHP sells at the equilibrium, J/day."""
        return [c.capacity * (1.0 - b) for c, b in zip(city.cchps, self.betas_star)]


class Follower(Protocol):
    """What the leader can observe of a CCHP: its answer to a bid."""

    def respond(self, p_b: float) -> float:
        ...


class CchpFollower:
    """Follower that answers with the closed-form best response of its own CCHP."""

    def __init__(self, params: CchpParams, market: MarketParams):
        self._params = params
        self._market = market

    def respond(self, p_b: float) -> float:
        return best_response(self._params, self._market, p_b)


def base_profit(market: MarketParams) -> float:
    """APG profit with no CCHP in the city: all load self-generated at p_c."""
    return (market.p_s - market.p_c) * market.r_load


def profit_from_sold(market: MarketParams, p_b: float, sold: float) -> float:
    """Leader profit from the total energy bought at p_b."""
    # Cost-price form; exact at p_b == p_c and at sold == 0.
    return (market.p_c - p_b) * sold + (market.p_s - market.p_c) * market.r_load


def best_response(params: CchpParams, market: MarketParams, p_b: float) -> float:
    """Utility-maximizing electricity share a CCHP keeps at bid p_b.

    Args:
        params: The CCHP's constants
        market: APG prices (bounds the admissible bids)
        p_b: Bid in [p_m, p_c]

    Returns:
        beta in [0, 1]
    """
    if not market.p_m <= p_b <= market.p_c:
        raise DomainError(f"bid {p_b} outside [{market.p_m}, {market.p_c}]")
    beta = (params.k1 / p_b - 1.0 / params.b1) / params.capacity
    return min(1.0, max(0.0, beta))


def apg_profit(city: City, p_b: float, betas: Sequence[float]) -> float:
    """APG profit for a bid and the CCHPs' partition coefficients.

    Returns:
        (p_s−p_b)·E_sold + (p_s−p_c)·(R−E_sold), evaluated in its equivalent
        cost-price form (p_c−p_b)·E_sold + (p_s−p_c)·R
    """
    if len(betas) != len(city.cchps):
        raise DomainError(f"expected {len(city.cchps)} betas, got {len(betas)}")
    for i, beta in enumerate(betas):
        if not 0.0 <= beta <= 1.0:
            raise DomainError(f"beta[{i}]={beta} outside [0, 1]")
    sold = sum(c.capacity * (1.0 - b) for c, b in zip(city.cchps, betas))
    return profit_from_sold(city.market, p_b, sold)


def profit_second_derivative(city: City, p_b: float) -> float:
    """d²L/dp_b² with best responses substituted (unclamped)."""
    return -2.0 * city.market.p_c / p_b**3 * sum(c.k1 for c in city.cchps)


def optimal_bid_closed_form(city: City) -> float:
    """Profit-maximizing bid with complete information, clamped to [p_m, p_c]."""
    market = city.market
    if not city.cchps:
        return market.p_c
    numerator = market.p_c * sum(c.k1 for c in city.cchps)
    denominator = sum(c.capacity + 1.0 / c.b1 for c in city.cchps)
    p_b = math.sqrt(numerator / denominator)
    if p_b >= market.p_c:
        return market.p_c
    if p_b <= market.p_m:
        return market.p_m
    return p_b


def _utilities(city: City, p_b: float, betas: Sequence[float]) -> Tuple[float, ...]:
    return tuple(utility(c, b, p_b) for c, b in zip(city.cchps, betas))


def solve_centralized(city: City) -> EquilibriumResult:
    """Solve the game with full knowledge of every CCHP."""
    p_b = optimal_bid_closed_form(city)
    betas = tuple(best_response(c, city.market, p_b) for c in city.cchps)
    profit = apg_profit(city, p_b, betas)
    logger.info(f"✅ Centralized equilibrium: p_b*={p_b:.6e}, profit={profit:.4f}")
    return EquilibriumResult(
        p_b_star=p_b,
        betas_star=betas,
        profit_star=profit,
        utilities_star=_utilities(city, p_b, betas),
        trace=(TraceEntry(1, p_b, betas, profit),),
        method=SolveMethod.CENTRALIZED,
    )


def bid_schedule(market: MarketParams, iterations: int) -> np.ndarray:
    """Even grid of bids from p_m to p_c inclusive."""
    if iterations < 2:
        raise DomainError(f"iterations={iterations} must be at least 2")
    return np.linspace(market.p_m, market.p_c, iterations)


def solve_distributed(
    city: City,
    iterations: int = DEFAULT_ITERATIONS,
    followers: Optional[Sequence[Follower]] = None,
) -> EquilibriumResult:
    """Sweep the bid from p_m to p_c, asking the followers at each step.

    The leader only sees the betas the followers return; it keeps the bid with
    the highest profit, the later bid winning ties.

    Args:
        city: The city (its CCHP params are used only by the default followers
            and for reporting utilities)
        iterations: Number of bids on the grid, endpoints included
        followers: Optional follower implementations, one per CCHP

    Returns:
        The equilibrium with the full convergence trace
    """
    market = city.market
    bids = bid_schedule(market, iterations)
    if followers is None:
        followers = [CchpFollower(c, market) for c in city.cchps]
    capacities = [c.capacity for c in city.cchps]

    best_bid = market.p_m
    best_profit = base_profit(market)
    best_betas: Tuple[float, ...] = tuple(0.0 for _ in city.cchps)
    trace = []

    for iteration, p_b in enumerate(bids, start=1):
        p_b = float(p_b)
        betas = tuple(f.respond(p_b) for f in followers)
        sold = sum(cap * (1.0 - b) for cap, b in zip(capacities, betas))
        profit = profit_from_sold(market, p_b, sold)
        trace.append(TraceEntry(iteration, p_b, betas, profit))
        if profit >= best_profit:
            best_bid, best_profit, best_betas = p_b, profit, betas

    logger.info(
        f"✅ Distributed equilibrium after {iterations} iterations: "
        f"p_b*={best_bid:.6e}, profit={best_profit:.4f}"
    )
    return EquilibriumResult(
        p_b_star=best_bid,
        betas_star=best_betas,
        profit_star=best_profit,
        utilities_star=_utilities(city, best_bid, best_betas),
        trace=tuple(trace),
        method=SolveMethod.DISTRIBUTED,
        iterations=iterations,
    )


def verify_se(
    city: City,
    result: EquilibriumResult,
    grid: Optional[int] = None,
    tol: float = 1e-9,
) -> bool:
    """Check both equilibrium inequalities on finite meshes.

    (a) no CCHP gains more than tol by deviating to any beta on a grid-point
    mesh of [0, 1]; (b) no bid on a grid-point mesh of [p_m, p_c], with the
    CCHPs re-best-responding, beats the equilibrium profit by more than tol.

    A distributed result is only exact on its own sweep grid: a finer bid
    mesh can beat it by up to one stride. With grid=None the mesh is
    result.iterations points for a distributed result and 1000 otherwise.
    """
    if grid is None:
        grid = result.iterations if result.method == SolveMethod.DISTRIBUTED else 1000
    market = city.market
    if not market.p_m <= result.p_b_star <= market.p_c:
        return False
    if len(result.betas_star) != len(city.cchps):
        return False

    beta_mesh = np.linspace(0.0, 1.0, grid)
    for i, (cchp, beta_star) in enumerate(zip(city.cchps, result.betas_star)):
        if not 0.0 <= beta_star <= 1.0:
            return False
        u_star = utility(cchp, beta_star, result.p_b_star)
        u_best = max(utility(cchp, float(b), result.p_b_star) for b in beta_mesh)
        if u_star < u_best - tol:
            logger.info(f"❌ CCHP {i} can gain {u_best - u_star:.3e} by deviating")
            return False

    responses = [best_response(c, market, result.p_b_star) for c in city.cchps]
    l_star = apg_profit(city, result.p_b_star, responses)
    for p_b in bid_schedule(market, grid):
        p_b = float(p_b)
        betas = [best_response(c, market, p_b) for c in city.cchps]
        l_dev = apg_profit(city, p_b, betas)
        if l_star < l_dev - tol:
            logger.info(f"❌ APG can gain {l_dev - l_star:.3e} by bidding {p_b:.6e}")
            return False
    return True


def profit_curve(city: City, bids: Sequence[float]) -> np.ndarray:
    """Profit at each bid with best responses substituted."""
    market = city.market
    k1 = np.array([c.k1 for c in city.cchps])
    inv_b1 = np.array([1.0 / c.b1 for c in city.cchps])
    cap = np.array([c.capacity for c in city.cchps])
    bids = np.asarray(bids, dtype=float)
    if np.any(bids < market.p_m) or np.any(bids > market.p_c):
        raise DomainError(f"bids must lie in [{market.p_m}, {market.p_c}]")
    betas = np.clip((k1[None, :] / bids[:, None] - inv_b1[None, :]) / cap[None, :], 0.0, 1.0)
    sold = (cap[None, :] * (1.0 - betas)).sum(axis=1)
    return (market.p_c - bids) * sold + (market.p_s - market.p_c) * market.r_load


def utility_curve(params: CchpParams, betas: Sequence[float], p_b: float) -> np.ndarray:
    """Utility of one CCHP over a range of betas at a fixed bid."""
    return np.array([utility(params, float(b), p_b) for b in betas])
