"""CCHP energy balances and the community utility function.

All quantities are SI: energies in J/day, fuel in m³/day, prices in coin/J.
Every function is pure over frozen inputs.
"""
import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Tuple

from cchp_chain.config import DEFAULT_K2, NATURAL_GAS_CALORIFIC_VALUE
from cchp_chain.errors import DomainError, InfeasiblePrices, NonPositiveParameter

if TYPE_CHECKING:
    from cchp_chain.energy.stackelberg_game import MarketParams

logger = logging.getLogger("cchp_model")

E_MINUS_ONE = math.e - 1.0


@dataclass(frozen=True)
class CchpParams:
    """Physical and preference constants of one community's CCHP system."""

    f_tot: float
    eta_pgu: float
    eta_rec: float
    eta_boi: float
    eta_com: float
    q: float
    k1: float
    k2: float
    b1: float
    b2: Optional[float]
    cop_cc: Optional[float] = None
    eta_hc: Optional[float] = None

    @property
    def capacity(self) -> float:
        """Electricity the PGU makes from the whole fuel quota, J/day."""
        return self.q * self.f_tot * self.eta_pgu

    @property
    def recoverable_heat(self) -> float:
        """Cooling+heating delivered from recovered waste heat at alpha=1, J/day."""
        return self.q * self.f_tot * (1.0 - self.eta_pgu) * self.eta_rec * self.eta_com


@dataclass(frozen=True)
class EnergyBalance:
    """Daily energy flows through a CCHP for a given (alpha, beta)."""

    e_pgu: float
    e_building: float
    e_exc: float
    f_pgu: float
    f_boi: float
    q_w: float
    q_r: float
    q_boi: float
    q_com: float
    alpha: float
    beta: float


def _check_fraction(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise DomainError(f"{name}={value} outside [0, 1]")


def _check_price(p_b: float) -> None:
    if not p_b > 0.0:
        raise DomainError(f"p_b={p_b} must be positive")


def calibrate(
    f_tot: float,
    eta_pgu: float,
    eta_rec: float,
    eta_boi: float,
    eta_com: float,
    q: float = NATURAL_GAS_CALORIFIC_VALUE,
    k1: float = 0.0,
    k2: float = DEFAULT_K2,
    cop_cc: Optional[float] = None,
    eta_hc: Optional[float] = None,
) -> CchpParams:
    """Build CchpParams with the saturation coefficients b1 and b2.

    b1 is chosen so that ln(1 + b1·x) reaches exactly 1 when the whole PGU output
    stays in the community; b2 does the same for the recovered heat. With
    eta_pgu == 1 there is no waste heat, so b2 is absent.

    Args:
        f_tot: Fuel quota, m³/day
        eta_pgu: PGU heat-to-electricity efficiency, (0, 1]
        eta_rec: Heat-recovery efficiency, (0, 1]
        eta_boi: Boiler efficiency, (0, 1]
        eta_com: Comprehensive cooling/heating efficiency
        q: Calorific value of the fuel, J/m³
        k1: Electric utility weight, coin
        k2: Heat utility weight, coin
        cop_cc: Chiller COP, only bounds eta_com
        eta_hc: Heating-coil efficiency, only bounds eta_com

    Returns:
        Calibrated parameters

    Raises:
        NonPositiveParameter: on any physical constant <= 0
        DomainError: on an efficiency above 1 or eta_com outside its bounds
    """
    physical = {
        "f_tot": f_tot,
        "eta_pgu": eta_pgu,
        "eta_rec": eta_rec,
        "eta_boi": eta_boi,
        "eta_com": eta_com,
        "q": q,
    }
    for name, value in physical.items():
        if not value > 0.0:
            raise NonPositiveParameter(f"{name}={value} must be positive")
    for name in ("eta_pgu", "eta_rec", "eta_boi"):
        if physical[name] > 1.0:
            raise DomainError(f"{name}={physical[name]} exceeds 1")
    for name, value in (("cop_cc", cop_cc), ("eta_hc", eta_hc)):
        if value is not None and not value > 0.0:
            raise NonPositiveParameter(f"{name}={value} must be positive")
    if cop_cc is not None and eta_hc is not None:
        low, high = min(cop_cc, eta_hc), max(cop_cc, eta_hc)
        if not low <= eta_com <= high:
            raise DomainError(f"eta_com={eta_com} outside [{low}, {high}]")

    b1 = E_MINUS_ONE / (q * f_tot * eta_pgu)
    heat_scale = q * f_tot * (1.0 - eta_pgu) * eta_rec * eta_com
    b2 = E_MINUS_ONE / heat_scale if heat_scale > 0.0 else None

    return CchpParams(
        f_tot=f_tot,
        eta_pgu=eta_pgu,
        eta_rec=eta_rec,
        eta_boi=eta_boi,
        eta_com=eta_com,
        q=q,
        k1=k1,
        k2=k2,
        b1=b1,
        b2=b2,
        cop_cc=cop_cc,
        eta_hc=eta_hc,
    )


def energy_balance(params: CchpParams, alpha: float, beta: float) -> EnergyBalance:
    """Compute every daily flow of the CCHP by the heat balance.

    Args:
        params: CCHP constants
        alpha: Fuel share sent to the PGU, F_pgu/F_tot
        beta: Electricity share kept by the building, E_building/E_pgu

    Returns:
        The energy balance
    """
    _check_fraction("alpha", alpha)
    _check_fraction("beta", beta)

    f_pgu = alpha * params.f_tot
    f_boi = (1.0 - alpha) * params.f_tot
    e_pgu = params.eta_pgu * params.q * f_pgu
    e_building = beta * e_pgu
    q_w = (1.0 - params.eta_pgu) * params.q * f_pgu
    q_r = params.eta_rec * q_w
    q_boi = params.eta_boi * params.q * f_boi

    return EnergyBalance(
        e_pgu=e_pgu,
        e_building=e_building,
        e_exc=e_pgu - e_building,
        f_pgu=f_pgu,
        f_boi=f_boi,
        q_w=q_w,
        q_r=q_r,
        q_boi=q_boi,
        q_com=params.eta_com * (q_r + q_boi),
        alpha=alpha,
        beta=beta,
    )


def _heat_term(params: CchpParams, heat: float) -> float:
    # No waste heat means b2 is undefined; the heat utility is zero then.
    if params.b2 is None:
        return 0.0
    return params.k2 * math.log1p(params.b2 * heat)


def utility_full(params: CchpParams, alpha: float, beta: float, p_b: float) -> float:
    """Two-variable community utility: electric use + heat use + sale revenue.

    Args:
        params: CCHP constants
        alpha: Fuel share sent to the PGU
        beta: Electricity share kept by the building
        p_b: APG bid, coin/J

    Returns:
        Utility in coins
    """
    _check_fraction("alpha", alpha)
    _check_fraction("beta", beta)
    _check_price(p_b)

    generated = params.capacity * alpha
    electric = params.k1 * math.log1p(params.b1 * generated * beta)
    heat_in = (
        params.q * params.f_tot * params.eta_rec * (1.0 - params.eta_pgu) * alpha
        + params.q * params.f_tot * params.eta_boi * (1.0 - alpha)
    ) * params.eta_com
    revenue = p_b * generated * (1.0 - beta)
    return electric + _heat_term(params, heat_in) + revenue


def utility(params: CchpParams, beta: float, p_b: float) -> float:
    """Community utility with all fuel sent to the PGU (alpha = 1).

    The heat term does not depend on beta but is kept so values are absolute.
    """
    _check_fraction("beta", beta)
    _check_price(p_b)

    electric = params.k1 * math.log1p(params.b1 * params.capacity * beta)
    revenue = p_b * params.capacity * (1.0 - beta)
    return electric + _heat_term(params, params.recoverable_heat) + revenue


def marginal_utility(params: CchpParams, beta: float, p_b: float) -> float:
    """dU/dbeta of the single-variable utility."""
    _check_fraction("beta", beta)
    _check_price(p_b)
    c = params.capacity
    return c * (params.k1 * params.b1 / (1.0 + params.b1 * c * beta) - p_b)


def utility_second_derivative(params: CchpParams, beta: float) -> float:
    """d²U/dbeta²; strictly negative for k1 > 0."""
    _check_fraction("beta", beta)
    scale = params.b1 * params.capacity
    return -params.k1 * (scale / (1.0 + scale * beta)) ** 2


def k1_range(params: CchpParams, market: "MarketParams") -> Tuple[float, float]:
    """Valid interval of k1 so the best response stays in [0, 1] for every bid.

    Args:
        params: CCHP constants (k1 itself is ignored)
        market: APG prices

    Returns:
        (k1_min, k1_max)

    Raises:
        InfeasiblePrices: if p_c > e·p_m
    """
    if market.p_c > math.e * market.p_m:
        raise InfeasiblePrices(
            f"p_c={market.p_c} exceeds e·p_m={math.e * market.p_m}; no valid k1 exists"
        )
    scale = params.capacity / E_MINUS_ONE
    return market.p_c * scale, market.p_m * math.e * scale
