"""Scenario documents: TOML files describing cities, markets, chain and faults."""
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from cchp_chain.config import (
    APG_INITIAL_BALANCE,
    DEFAULT_ITERATIONS,
    DEFAULT_K2,
    DIFFICULTY_BITS,
    MICRO_COINS_PER_COIN,
    MINING_REWARD,
    NATURAL_GAS_CALORIFIC_VALUE,
    QUORUM,
    SIGNATURE_SCHEME,
)
from cchp_chain.energy.cchp_model import CchpParams, calibrate, k1_range
from cchp_chain.energy.stackelberg_game import City, MarketParams
from cchp_chain.errors import CchpChainError, ScenarioError
from cchp_chain.simulation.events import FaultSpec
from cchp_chain.simulation.sim_harness import LatencySpec, Scenario, inject_fault

logger = logging.getLogger("scenario_file")

_HEADER = re.compile(r"^\s*(\[\[?)\s*([A-Za-z0-9_.]+)\s*\]\]?")
_KEY = re.compile(r"^\s*([A-Za-z0-9_]+)\s*=")
_DECODE_LINE = re.compile(r"line (\d+)")

_CCHP_KEYS = {"f_tot", "eta_pgu", "eta_rec", "eta_boi", "eta_com", "q", "k1", "k2", "cop_cc", "eta_hc", "repeat"}
_MARKET_KEYS = {"p_s", "p_c", "p_m", "r_load", "r_load_multiple_of_capacity"}
_FAULT_KEYS = {"action", "kind", "source", "destination", "node", "round", "at_tick", "occurrence", "delay_ticks"}


class _LineIndex:
    """Maps (table, occurrence, key) to the line it was written on."""

    def __init__(self, text: str):
        self._tables: Dict[Tuple[str, int], int] = {}
        self._keys: Dict[Tuple[str, int, str], int] = {}
        counts: Dict[str, int] = {}
        table, occurrence = "", 0
        for lineno, line in enumerate(text.splitlines(), start=1):
            header = _HEADER.match(line)
            if header:
                table = header.group(2)
                if "." in table:
                    parent, child = table.rsplit(".", 1)
                    if parent in counts:
                        table = f"{parent}[{counts[parent] - 1}].{child}"
                if header.group(1) == "[[":
                    occurrence = counts.get(table, 0)
                    counts[table] = occurrence + 1
                else:
                    occurrence = 0
                self._tables.setdefault((table, occurrence), lineno)
                continue
            key = _KEY.match(line)
            if key:
                self._keys.setdefault((table, occurrence, key.group(1)), lineno)

    def line(self, table: str = "", occurrence: int = 0, key: Optional[str] = None) -> Optional[int]:
        if key is not None and (table, occurrence, key) in self._keys:
            return self._keys[(table, occurrence, key)]
        return self._tables.get((table, occurrence))


@dataclass
class CchpTemplate:
    """One [[cchps]] entry; k1 is a number or the string "uniform"."""

    values: Dict[str, Any]
    repeat: int = 1
    line: Optional[int] = None

    @property
    def uniform_k1(self) -> bool:
        return self.values.get("k1") == "uniform"


@dataclass
class CitySection:
    market: Dict[str, Any]
    cchps: List[CchpTemplate]
    table: str = ""


@dataclass
class ScenarioFile:
    """A parsed scenario document, before it is turned into domain objects."""

    path: str
    seed: int
    iterations: int
    rounds: int
    cities: List[CitySection]
    blockchain: Dict[str, Any] = field(default_factory=dict)
    ioe: Dict[str, Any] = field(default_factory=dict)
    latency: Dict[str, Any] = field(default_factory=dict)
    faults: List[Dict[str, Any]] = field(default_factory=list)
    index: Optional[_LineIndex] = None

    def _error(self, message: str, table: str = "", occurrence: int = 0, key: Optional[str] = None) -> ScenarioError:
        line = self.index.line(table, occurrence, key) if self.index else None
        return ScenarioError(message, self.path, line)

    # Domain objects

    def _market(self, section: CitySection, capacity: float) -> MarketParams:
        table = f"{section.table}market"
        values = section.market
        for name in ("p_s", "p_c", "p_m"):
            if name not in values:
                raise self._error(f"market is missing {name}", table, 0)
        if "r_load" in values and "r_load_multiple_of_capacity" in values:
            raise self._error("give r_load or r_load_multiple_of_capacity, not both", table, 0, "r_load")
        if "r_load" in values:
            r_load = float(values["r_load"])
        elif "r_load_multiple_of_capacity" in values:
            r_load = float(values["r_load_multiple_of_capacity"]) * capacity
        else:
            raise self._error("market needs r_load or r_load_multiple_of_capacity", table, 0)
        try:
            return MarketParams(float(values["p_s"]), float(values["p_c"]), float(values["p_m"]), r_load)
        except CchpChainError as e:
            raise self._error(f"{type(e).__name__}: {e}", table, 0, "p_s") from e

    def _calibrated(self, template: CchpTemplate) -> CchpParams:
        values = template.values
        missing = [n for n in ("f_tot", "eta_pgu") if n not in values]
        if missing:
            raise ScenarioError(f"cchps entry is missing {', '.join(missing)}", self.path, template.line)
        try:
            return calibrate(
                f_tot=float(values["f_tot"]),
                eta_pgu=float(values["eta_pgu"]),
                eta_rec=float(values.get("eta_rec", 0.8)),
                eta_boi=float(values.get("eta_boi", 0.9)),
                eta_com=float(values.get("eta_com", 1.0)),
                q=float(values.get("q", NATURAL_GAS_CALORIFIC_VALUE)),
                k1=0.0 if template.uniform_k1 else float(values.get("k1", 0.0)),
                k2=float(values.get("k2", DEFAULT_K2)),
                cop_cc=values.get("cop_cc"),
                eta_hc=values.get("eta_hc"),
            )
        except CchpChainError as e:
            raise ScenarioError(f"{type(e).__name__}: {e}", self.path, template.line) from e

    def _expand(self, section: CitySection, count: Optional[int] = None) -> List[Tuple[CchpParams, CchpTemplate]]:
        expanded = []
        for template in section.cchps:
            params = self._calibrated(template)
            expanded.extend((params, template) for _ in range(template.repeat))
        if count is not None:
            if not expanded:
                raise self._error("no cchps to draw from", section.table)
            expanded = [expanded[i % len(expanded)] for i in range(count)]
        return expanded

    def _city(self, section: CitySection, rng: np.random.Generator, strict_k1: bool, count: Optional[int] = None) -> City:
        expanded = self._expand(section, count)
        capacity = sum(p.capacity for p, _ in expanded)
        market = self._market(section, capacity)
        cchps = []
        for params, template in expanded:
            if template.uniform_k1:
                try:
                    low, high = k1_range(params, market)
                except CchpChainError as e:
                    raise ScenarioError(f"{type(e).__name__}: {e}", self.path, template.line) from e
                params = replace(params, k1=float(rng.uniform(low, high)))
            cchps.append(params)
        try:
            return City(market, tuple(cchps), strict_k1=strict_k1)
        except CchpChainError as e:
            line = expanded[0][1].line if expanded else None
            raise ScenarioError(f"{type(e).__name__}: {e}", self.path, line) from e

    def build_cities(self, strict_k1: bool = False) -> List[City]:
        rng = np.random.default_rng(self.seed)
        return [self._city(section, rng, strict_k1) for section in self.cities]

    def table_cities(self, sizes: Sequence[int], strict_k1: bool = False) -> Dict[int, City]:
        """One city per size from the first city's CCHPs.

        k1 values are drawn once for the largest size; smaller cities use a
        prefix, so each row adds CCHPs to the previous one.
        """
        if not sizes or min(sizes) < 1:
            raise ScenarioError(f"sizes must be positive, got {list(sizes)}", self.path)
        section = self.cities[0]
        rng = np.random.default_rng(self.seed)
        largest = self._city(section, rng, strict_k1, count=max(sizes))
        cities = {}
        for size in sizes:
            try:
                cities[size] = City(largest.market, largest.cchps[:size], strict_k1=strict_k1)
            except CchpChainError as e:
                raise ScenarioError(f"{type(e).__name__}: {e}", self.path) from e
        return cities

    def to_scenario(self, strict_k1: bool = False) -> Scenario:
        cities = self.build_cities(strict_k1)
        chain = self.blockchain
        ioe = self.ioe
        try:
            reward = round(float(chain.get("reward", MINING_REWARD / MICRO_COINS_PER_COIN)) * MICRO_COINS_PER_COIN)
            balance = ioe.get("apg_initial_balance")
            apg_balance = APG_INITIAL_BALANCE if balance is None else round(float(balance) * MICRO_COINS_PER_COIN)
            hash_power = chain.get("hash_power")
            latency = LatencySpec(
                mode=self.latency.get("mode", "fixed"),
                low=int(self.latency.get("low", 1)),
                high=int(self.latency.get("high", self.latency.get("low", 1))),
            )
            scenario = Scenario(
                cities=cities,
                difficulty_bits=int(chain.get("difficulty_bits", DIFFICULTY_BITS)),
                reward=reward,
                quorum=chain.get("quorum", QUORUM),
                hash_power=[float(h) for h in hash_power] if hash_power is not None else None,
                iterations=self.iterations,
                rounds=self.rounds,
                latency=latency,
                seed=self.seed,
                apg_initial_balance=apg_balance,
                signature_scheme=ioe.get("signature_scheme", SIGNATURE_SCHEME),
            )
        except (CchpChainError, TypeError, ValueError) as e:
            raise self._error(f"{type(e).__name__}: {e}", "blockchain") from e

        for occurrence, values in enumerate(self.faults):
            try:
                scenario = inject_fault(scenario, FaultSpec(**values))
            except (CchpChainError, TypeError) as e:
                raise self._error(f"{type(e).__name__}: {e}", "faults", occurrence) from e
        return scenario


def _table(document: dict, name: str, index: _LineIndex, path: str) -> Dict[str, Any]:
    value = document.get(name, {})
    if not isinstance(value, dict):
        raise ScenarioError(f"{name} must be a table", path, index.line("", 0, name))
    return value


def _check_keys(values: dict, allowed: set, path: str, line: Optional[int], where: str) -> None:
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ScenarioError(f"unknown key(s) in {where}: {', '.join(unknown)}", path, line)


def _templates(entries: Any, table: str, index: _LineIndex, path: str) -> List[CchpTemplate]:
    if not isinstance(entries, list) or not entries:
        raise ScenarioError(f"{table} needs at least one [[{table}]] entry", path, index.line(table))
    templates = []
    for occurrence, entry in enumerate(entries):
        line = index.line(table, occurrence)
        _check_keys(entry, _CCHP_KEYS, path, line, table)
        values = dict(entry)
        repeat = values.pop("repeat", 1)
        if not isinstance(repeat, int) or repeat < 1:
            raise ScenarioError(f"repeat={repeat!r} must be a positive integer", path, index.line(table, occurrence, "repeat"))
        k1 = values.get("k1", 0.0)
        if isinstance(k1, str) and k1 != "uniform":
            raise ScenarioError(f'k1 must be a number or "uniform", got {k1!r}', path, index.line(table, occurrence, "k1"))
        templates.append(CchpTemplate(values, repeat, line))
    return templates


def parse_scenario(text: str, path: str = "<scenario>") -> ScenarioFile:
    """Parse a scenario document.

    Raises:
        ScenarioError: on a syntax error or an unknown or ill-typed key, with
            the offending line when it can be located
    """
    try:
        document = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        match = _DECODE_LINE.search(str(e))
        raise ScenarioError(f"syntax error: {e}", path, int(match.group(1)) if match else None) from e
    index = _LineIndex(text)

    game = _table(document, "game", index, path)
    seed = document.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ScenarioError(f"seed={seed!r} must be a non-negative integer", path, index.line("", 0, "seed"))

    sections = []
    if "city" in document:
        if "cities" in document or "market" in document or "cchps" in document:
            raise ScenarioError("use either [[city]] tables or top-level market/cchps, not both", path, index.line("city"))
        for occurrence, entry in enumerate(document["city"]):
            line = index.line("city", occurrence)
            _check_keys(entry, {"market", "cchps"}, path, line, "city")
            market = entry.get("market", {})
            _check_keys(market, _MARKET_KEYS, path, line, "city.market")
            cchps = _templates(entry.get("cchps"), f"city[{occurrence}].cchps", index, path)
            sections.append(CitySection(market, cchps, f"city[{occurrence}]."))
    else:
        market = _table(document, "market", index, path)
        _check_keys(market, _MARKET_KEYS, path, index.line("market"), "market")
        cchps = _templates(document.get("cchps"), "cchps", index, path)
        count = document.get("cities", 1)
        if not isinstance(count, int) or count < 1:
            raise ScenarioError(f"cities={count!r} must be a positive integer", path, index.line("", 0, "cities"))
        sections = [CitySection(market, cchps, "") for _ in range(count)]

    faults = document.get("faults", [])
    for occurrence, entry in enumerate(faults):
        _check_keys(entry, _FAULT_KEYS, path, index.line("faults", occurrence), "faults")

    return ScenarioFile(
        path=path,
        seed=seed,
        iterations=int(game.get("iterations", DEFAULT_ITERATIONS)),
        rounds=int(game.get("rounds", 1)),
        cities=sections,
        blockchain=_table(document, "blockchain", index, path),
        ioe=_table(document, "ioe", index, path),
        latency=_table(document, "latency", index, path),
        faults=list(faults),
        index=index,
    )


def load_scenario(path: str) -> ScenarioFile:
    """Read and parse a scenario file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ScenarioError(f"cannot read scenario: {e}", path) from e
    logger.debug(f"📦 Loaded scenario {path}")
    return parse_scenario(text, path)


def with_overrides(scenario_file: ScenarioFile, seed: Optional[int] = None, iterations: Optional[int] = None) -> ScenarioFile:
    """Apply command-line overrides on top of the file's own values."""
    if seed is not None:
        scenario_file = replace(scenario_file, seed=seed)
    if iterations is not None:
        scenario_file = replace(scenario_file, iterations=iterations)
    return scenario_file
