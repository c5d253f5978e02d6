"""`table`: centralized versus distributed profit as the city grows."""
import argparse
import logging
from typing import List

from cchp_chain.commands import EXIT_OK, fmt, output_dir, write_csv
from cchp_chain.energy.stackelberg_game import base_profit, solve_centralized, solve_distributed
from cchp_chain.scenario_file import load_scenario, with_overrides

logger = logging.getLogger("cmd_table")

DEFAULT_SIZES = "5,10,15,20,25,30"
TABLE_HEADER = [
    "size",
    "centralized_p_b",
    "centralized_profit",
    "distributed_p_b",
    "distributed_profit",
    "increment_percent",
]


def parse_sizes(text: str) -> List[int]:
    try:
        sizes = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"sizes must be comma-separated integers: {text!r}") from e
    if not sizes or min(sizes) < 1:
        raise argparse.ArgumentTypeError(f"sizes must be positive: {text!r}")
    return sizes


def register(subparsers) -> None:
    parser = subparsers.add_parser("table", help="Compare centralized and distributed profits")
    parser.add_argument("scenario", help="Scenario file (.scn)")
    parser.add_argument("--sizes", type=parse_sizes, default=parse_sizes(DEFAULT_SIZES))
    parser.add_argument("--iterations", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--strict-k1", action="store_true")
    parser.add_argument("--out", default=".", help="Output directory")
    parser.set_defaults(handler=cmd_table)


def build_table(scenario_file, sizes: List[int], strict_k1: bool = False):
    """Rows of (size, centralized, distributed, increment) and the base profit."""
    cities = scenario_file.table_cities(sizes, strict_k1=strict_k1)
    base = base_profit(cities[sizes[0]].market)
    rows = []
    for size in sizes:
        city = cities[size]
        centralized = solve_centralized(city)
        distributed = solve_distributed(city, scenario_file.iterations)
        increment = distributed.profit_star / base * 100.0
        rows.append([
            size,
            centralized.p_b_star,
            centralized.profit_star,
            distributed.p_b_star,
            distributed.profit_star,
            increment,
        ])
    return rows, base


def cmd_table(args: argparse.Namespace) -> int:
    scenario_file = with_overrides(load_scenario(args.scenario), seed=args.seed, iterations=args.iterations)
    rows, base = build_table(scenario_file, args.sizes, args.strict_k1)

    print(f"base profit (p_s-p_c)*R = {fmt(base)}")
    print("  ".join(f"{h:>18s}" for h in TABLE_HEADER))
    for row in rows:
        cells = [f"{row[0]:>18d}"] + [f"{fmt(v):>18s}" for v in row[1:]]
        print("  ".join(cells))

    path = output_dir(args.out) / "table.csv"
    write_csv(path, TABLE_HEADER, rows)
    logger.info(f"✅ Wrote {path}")
    return EXIT_OK
