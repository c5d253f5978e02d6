"""`solve`: equilibrium of every city in a scenario, with traces and sweeps."""
import argparse
import logging

import numpy as np

from cchp_chain.commands import EXIT_OK, fmt, output_dir, write_csv
from cchp_chain.energy.stackelberg_game import (
    City,
    EquilibriumResult,
    SolveMethod,
    bid_schedule,
    profit_curve,
    solve_centralized,
    solve_distributed,
    utility_curve,
)
from cchp_chain.scenario_file import load_scenario, with_overrides

logger = logging.getLogger("cmd_solve")

SWEEP_POINTS = 101


def register(subparsers) -> None:
    parser = subparsers.add_parser("solve", help="Solve the trading game of each city")
    parser.add_argument("scenario", help="Scenario file (.scn)")
    parser.add_argument(
        "--method",
        choices=[m.value for m in SolveMethod],
        default=SolveMethod.DISTRIBUTED.value,
    )
    parser.add_argument("--iterations", type=int, default=None, help="Bids on the sweep grid")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--strict-k1", action="store_true", help="Reject k1 outside its valid range")
    parser.add_argument("--sweep", choices=("beta", "bid"), default=None, help="Also write a curve CSV")
    parser.add_argument("--points", type=int, default=SWEEP_POINTS, help="Points on a sweep curve")
    parser.add_argument("--out", default=".", help="Output directory")
    parser.set_defaults(handler=cmd_solve)


def format_equilibrium(city_id: str, result: EquilibriumResult) -> str:
    lines = [
        f"{city_id}: method={result.method.value} iterations={result.iterations}",
        f"  p_b*   = {fmt(result.p_b_star)}",
        f"  profit = {fmt(result.profit_star)}",
        "  cchp  beta*          utility",
    ]
    for i, (beta, u) in enumerate(zip(result.betas_star, result.utilities_star), start=1):
        lines.append(f"  {i:<5d} {fmt(beta):<14s} {fmt(u)}")
    return "\n".join(lines)


def trace_rows(result: EquilibriumResult):
    for entry in result.trace:
        yield [entry.iteration, entry.p_b, entry.profit, *entry.betas]


def _write_sweep(kind: str, city: City, result: EquilibriumResult, path, points: int) -> None:
    if kind == "bid":
        bids = bid_schedule(city.market, points)
        profits = profit_curve(city, bids)
        write_csv(path, ["p_b", "profit"], ([float(b), float(p)] for b, p in zip(bids, profits)))
        return
    betas = np.linspace(0.0, 1.0, points)
    curves = [utility_curve(c, betas, result.p_b_star) for c in city.cchps]
    header = ["beta"] + [f"utility_{i}" for i in range(1, len(city.cchps) + 1)]
    rows = ([float(b)] + [float(curve[k]) for curve in curves] for k, b in enumerate(betas))
    write_csv(path, header, rows)


def cmd_solve(args: argparse.Namespace) -> int:
    scenario_file = with_overrides(load_scenario(args.scenario), seed=args.seed, iterations=args.iterations)
    cities = scenario_file.build_cities(strict_k1=args.strict_k1)
    out = output_dir(args.out)

    for j, city in enumerate(cities, start=1):
        city_id = f"city{j}"
        if args.method == SolveMethod.CENTRALIZED.value:
            result = solve_centralized(city)
        else:
            result = solve_distributed(city, scenario_file.iterations)
        print(format_equilibrium(city_id, result))

        header = ["iteration", "p_b", "profit"] + [f"beta_{i}" for i in range(1, len(city.cchps) + 1)]
        trace_path = out / f"trace_{city_id}.csv"
        write_csv(trace_path, header, trace_rows(result))
        logger.info(f"✅ Wrote {trace_path}")

        if args.sweep:
            sweep_path = out / f"sweep_{args.sweep}_{city_id}.csv"
            _write_sweep(args.sweep, city, result, sweep_path, args.points)
            logger.info(f"✅ Wrote {sweep_path}")
    return EXIT_OK
