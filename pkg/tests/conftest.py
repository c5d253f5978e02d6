"""Shared fixtures: the reference CCHP settings and small cities built from them."""
import logging
from pathlib import Path

import pytest

from cchp_chain.energy.cchp_model import calibrate
from cchp_chain.energy.stackelberg_game import City, MarketParams

logger = logging.getLogger("tests")

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"

P_S, P_C, P_M = 5.5e-8, 4e-8, 2e-8
K1_REF = 197.7069


def reference_cchp(k1: float = K1_REF, f_tot: float = 200.0):
    return calibrate(f_tot=f_tot, eta_pgu=1.0, eta_rec=0.8, eta_boi=0.9, eta_com=1.0, k1=k1)


def make_city(k1s, r_load=None, r_multiple: float = 2.0, strict_k1: bool = False) -> City:
    cchps = tuple(reference_cchp(k1) for k1 in k1s)
    capacity = sum(c.capacity for c in cchps)
    market = MarketParams(P_S, P_C, P_M, r_load if r_load is not None else r_multiple * capacity)
    return City(market, cchps, strict_k1=strict_k1)


@pytest.fixture
def market():
    return MarketParams(P_S, P_C, P_M, 2 * 7.2e9)


@pytest.fixture
def ref_cchp():
    return reference_cchp()


@pytest.fixture
def chp_cchp():
    """A CCHP with waste heat, so both utility terms are live."""
    return calibrate(f_tot=100.0, eta_pgu=0.3, eta_rec=0.8, eta_boi=0.9, eta_com=1.0, k1=80.0, k2=40.0)


@pytest.fixture
def single_city():
    return make_city([K1_REF])


@pytest.fixture
def five_cchp_city():
    return make_city([K1_REF] * 5)


@pytest.fixture
def scenario_dir():
    return SCENARIO_DIR
