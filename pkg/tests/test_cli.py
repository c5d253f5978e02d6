import csv

import pytest

from cchp_chain.cli import main
from cchp_chain.energy.stackelberg_game import solve_distributed
from cchp_chain.errors import ScenarioError
from cchp_chain.scenario_file import load_scenario, parse_scenario

RUN_FILES = ("report.json", "chain.dat", "balances.json", "events.log")


def _rows(path):
    with open(path, encoding="utf-8", newline="") as handle:
        return list(csv.reader(handle))


def _scenario(tmp_path, lines):
    path = tmp_path / "case.scn"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


# solve

def test_solve_writes_trace_at_reference_bid(scenario_dir, tmp_path, capsys):
    five_cchps = str(scenario_dir / "fig6.scn")
    assert main(["solve", five_cchps, "--out", str(tmp_path)]) == 0
    assert "p_b*" in capsys.readouterr().out

    header, *rows = _rows(tmp_path / "trace_city1.csv")
    assert header == ["iteration", "p_b", "profit", "beta_1", "beta_2", "beta_3", "beta_4", "beta_5"]
    assert len(rows) == 100
    best = max(rows, key=lambda r: (float(r[2]), int(r[0])))
    assert float(best[1]) == pytest.approx(2.64e-8, abs=2e-10)

    city = load_scenario(five_cchps).build_cities()[0]
    trace = solve_distributed(city, 100).trace
    assert [float(r[1]) for r in rows] == [e.p_b for e in trace]
    assert [float(r[2]) for r in rows] == [e.profit for e in trace]


def test_solve_centralized_and_sweep(scenario_dir, tmp_path):
    single = str(scenario_dir / "fig4.scn")
    args = ["solve", single, "--method", "centralized", "--sweep", "bid", "--points", "11", "--out", str(tmp_path)]
    assert main(args) == 0
    assert len(_rows(tmp_path / "trace_city1.csv")) == 2
    header, *rows = _rows(tmp_path / "sweep_bid_city1.csv")
    assert header == ["p_b", "profit"]
    assert len(rows) == 11
    assert float(rows[0][0]) == pytest.approx(2e-8)
    assert float(rows[-1][0]) == pytest.approx(4e-8)


def test_solve_beta_sweep_has_one_column_per_cchp(scenario_dir, tmp_path):
    assert main(["solve", str(scenario_dir / "fig6.scn"), "--sweep", "beta", "--out", str(tmp_path)]) == 0
    header, *rows = _rows(tmp_path / "sweep_beta_city1.csv")
    assert header == ["beta"] + [f"utility_{i}" for i in range(1, 6)]
    assert len(rows) == 101


def test_infeasible_prices_exit_with_config_error(tmp_path, capsys):
    path = _scenario(tmp_path, [
        "seed = 1",
        "[market]",
        "p_s = 5.5e-8",
        "p_c = 4e-8",
        "p_m = 1e-8",
        "r_load_multiple_of_capacity = 2",
        "",
        "[[cchps]]",
        "f_tot = 200",
        "eta_pgu = 1.0",
        'k1 = "uniform"',
    ])
    assert main(["solve", path, "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert f"{path}:8" in err
    assert "InfeasiblePrices" in err


def test_strict_k1_rejects_out_of_range(tmp_path, capsys):
    path = _scenario(tmp_path, [
        "[market]",
        "p_s = 5.5e-8",
        "p_c = 4e-8",
        "p_m = 2e-8",
        "r_load_multiple_of_capacity = 2",
        "[[cchps]]",
        "f_tot = 200",
        "eta_pgu = 1.0",
        "k1 = 300.0",
    ])
    assert main(["solve", path, "--out", str(tmp_path)]) == 0
    assert main(["solve", path, "--strict-k1", "--out", str(tmp_path)]) == 2
    assert "K1OutOfRange" in capsys.readouterr().err


# table

def test_table_reproduces_base_profit_and_growth(scenario_dir, tmp_path, capsys):
    assert main(["table", str(scenario_dir / "table1.scn"), "--out", str(tmp_path)]) == 0
    assert "base profit (p_s-p_c)*R = 3240" in capsys.readouterr().out

    header, *rows = _rows(tmp_path / "table.csv")
    assert header[0] == "size"
    assert [int(r[0]) for r in rows] == [5, 10, 15, 20, 25, 30]
    increments = []
    for _, _, centralized, _, distributed, increment in rows:
        assert (float(centralized) - float(distributed)) / float(centralized) <= 1e-4
        increments.append(float(increment))
    assert all(a < b for a, b in zip(increments, increments[1:]))
    assert increments[0] > 100.0


def test_table_rejects_bad_sizes(scenario_dir, tmp_path):
    with pytest.raises(SystemExit):
        main(["table", str(scenario_dir / "table1.scn"), "--sizes", "5,x", "--out", str(tmp_path)])


# run and verify-chain

def test_run_then_verify_chain(scenario_dir, tmp_path, capsys):
    assert main(["run", str(scenario_dir / "fig6.scn"), "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.rstrip().endswith("ok")
    for name in RUN_FILES:
        assert (tmp_path / name).exists()

    assert main(["verify-chain", str(tmp_path / "chain.dat")]) == 0
    assert capsys.readouterr().out.strip() == "Ok"


def test_verify_chain_detects_damage(scenario_dir, tmp_path, capsys):
    assert main(["run", str(scenario_dir / "fig6.scn"), "--out", str(tmp_path)]) == 0
    data = (tmp_path / "chain.dat").read_bytes()
    capsys.readouterr()

    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0x01
    (tmp_path / "flipped.dat").write_bytes(bytes(flipped))
    assert main(["verify-chain", str(tmp_path / "flipped.dat")]) == 1

    (tmp_path / "short.dat").write_bytes(data[:-7])
    assert main(["verify-chain", str(tmp_path / "short.dat")]) == 1

    assert main(["verify-chain", str(tmp_path / "missing.dat")]) == 1
    out = capsys.readouterr().out
    assert out.count("invalid:") == 3


def test_run_outputs_are_byte_identical(scenario_dir, tmp_path):
    scenario = str(scenario_dir / "three_cities.scn")
    assert main(["run", scenario, "--out", str(tmp_path / "a")]) == 0
    assert main(["run", scenario, "--out", str(tmp_path / "b")]) == 0
    for name in RUN_FILES:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_run_with_faults_reports_rejections(scenario_dir, tmp_path, capsys):
    assert main(["run", str(scenario_dir / "tamper_payment.scn"), "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "rejected Payment at city1/cchp2" in out
    assert main(["verify-chain", str(tmp_path / "chain.dat")]) == 0


def test_missing_scenario_is_a_config_error(tmp_path):
    assert main(["run", str(tmp_path / "nope.scn"), "--out", str(tmp_path)]) == 2


# Scenario documents

def test_parse_error_carries_line():
    with pytest.raises(ScenarioError) as info:
        parse_scenario("seed = 1\n[market\np_s = 1\n", "bad.scn")
    assert info.value.line == 2


def test_unknown_key_is_anchored_to_its_table():
    text = "\n".join([
        "[market]",
        "p_s = 5.5e-8",
        "p_c = 4e-8",
        "p_m = 2e-8",
        "r_load = 1e11",
        "",
        "[[cchps]]",
        "f_tot = 200",
        "eta_pgu = 1.0",
        "",
        "[[cchps]]",
        "f_tot = 200",
        "colour = 3",
    ])
    with pytest.raises(ScenarioError) as info:
        parse_scenario(text, "keys.scn")
    assert info.value.line == 11
    assert "colour" in str(info.value)


def test_bad_market_value_points_at_market():
    text = "\n".join([
        "seed = 3",
        "[market]",
        "p_s = 3e-8",
        "p_c = 4e-8",
        "p_m = 2e-8",
        "r_load = 1e11",
        "[[cchps]]",
        "f_tot = 200",
        "eta_pgu = 1.0",
        "k1 = 190.0",
    ])
    with pytest.raises(ScenarioError) as info:
        parse_scenario(text, "market.scn").build_cities()
    assert info.value.line == 3


def test_fault_with_unknown_target_points_at_fault():
    text = "\n".join([
        "[market]",
        "p_s = 5.5e-8",
        "p_c = 4e-8",
        "p_m = 2e-8",
        "r_load_multiple_of_capacity = 2",
        "[[cchps]]",
        "f_tot = 200",
        "eta_pgu = 1.0",
        "k1 = 197.7069",
        "[[faults]]",
        'action = "drop"',
        'kind = "Payment"',
        "[[faults]]",
        'action = "drop"',
        'destination = "city7/apg"',
    ])
    with pytest.raises(ScenarioError) as info:
        parse_scenario(text, "faults.scn").to_scenario()
    assert info.value.line == 13
    assert "UnknownTarget" in str(info.value)


def test_city_tables_and_shared_templates(scenario_dir):
    per_city = load_scenario(str(scenario_dir / "tamper_payment.scn")).build_cities()
    assert [len(c.cchps) for c in per_city] == [5, 2]
    shared = load_scenario(str(scenario_dir / "three_cities.scn"))
    cities = shared.build_cities()
    assert len(cities) == 3
    assert all(len(c.cchps) == 5 for c in cities)
    assert [c.k1 for c in cities[0].cchps] != [c.k1 for c in cities[1].cchps]
    assert [c.k1 for c in shared.build_cities()[0].cchps] == [c.k1 for c in cities[0].cchps]


def test_coin_units_in_scenario(scenario_dir):
    scenario = load_scenario(str(scenario_dir / "fig6.scn")).to_scenario()
    assert scenario.reward == 50_000_000
    assert scenario.difficulty_bits == 16
    assert len(scenario.cities[0].cchps) == 5


@pytest.mark.parametrize("name", ["fig4.scn", "fig6.scn", "table1.scn"])
def test_default_scenarios_ship(scenario_dir, name):
    assert load_scenario(str(scenario_dir / name)).build_cities()
