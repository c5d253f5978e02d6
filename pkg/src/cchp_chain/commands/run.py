"""`run`: execute a scenario end to end and write its artifacts."""
import argparse
import json
import logging

from cchp_chain.commands import EXIT_INVARIANT_VIOLATION, EXIT_OK, fmt, output_dir
from cchp_chain.scenario_file import load_scenario, with_overrides
from cchp_chain.simulation.sim_harness import RunReport, run

logger = logging.getLogger("cmd_run")

REPORT_FILE = "report.json"
CHAIN_FILE = "chain.dat"
BALANCES_FILE = "balances.json"
EVENTS_FILE = "events.log"


def register(subparsers) -> None:
    parser = subparsers.add_parser("run", help="Run trading, mining and consensus for a scenario")
    parser.add_argument("scenario", help="Scenario file (.scn)")
    parser.add_argument("--iterations", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--strict-k1", action="store_true")
    parser.add_argument("--out", default=".", help="Output directory")
    parser.set_defaults(handler=cmd_run)


def write_report(report: RunReport, out_dir: str) -> None:
    out = output_dir(out_dir)
    (out / REPORT_FILE).write_text(report.to_json() + "\n", encoding="utf-8")
    (out / CHAIN_FILE).write_bytes(report.chain_bytes)
    balances = json.dumps(dict(sorted(report.balances.items())), indent=2)
    (out / BALANCES_FILE).write_text(balances + "\n", encoding="utf-8")
    (out / EVENTS_FILE).write_text(report.event_log_text(), encoding="utf-8")


def cmd_run(args: argparse.Namespace) -> int:
    scenario_file = with_overrides(load_scenario(args.scenario), seed=args.seed, iterations=args.iterations)
    scenario = scenario_file.to_scenario(strict_k1=args.strict_k1)
    report = run(scenario)
    write_report(report, args.out)

    for city_id, result in report.equilibria.items():
        print(f"{city_id}: p_b*={fmt(result.p_b_star)} profit={fmt(result.profit_star)}")
    print(f"chain length {report.chain_length}, {len(report.rejected)} rejected message(s)")
    for rejected in report.rejected:
        print(f"  rejected {rejected.kind} at {rejected.node} (tick {rejected.tick}): {rejected.reason}")

    if not report.ok:
        for failure in report.invariant_failures:
            print(f"invariant violated: {failure}")
        return EXIT_INVARIANT_VIOLATION
    print("ok")
    return EXIT_OK
