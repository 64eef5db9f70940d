import json

import numpy as np
import pytest

from freqquality.cli import (
    EXIT_INPUT,
    EXIT_OK,
    EXIT_SOLVER,
    SWEEP_COLUMNS,
    compare_agc,
    main,
    prepare,
    read_sweep_csv,
    simulate,
    sweep,
)
from freqquality.kpi import FrequencyTrace, read_trace, write_trace
from freqquality.scenario import load_scenario
from freqquality.solver import SimulationTrace


def write_json(path, data):
    path.write_text(json.dumps(data))
    return path


def test_run_writes_files_that_read_back(tmp_path, capsys):
    code = main(["run", "trip_lsi.json", "--horizon", "5", "--out-dir", str(tmp_path)])
    assert code == EXIT_OK
    trace = SimulationTrace.from_csv(tmp_path / "trip_lsi_trace.csv")
    assert trace.data.shape[0] == 501
    assert np.max(np.abs(trace.f_coi_hz - 50)) < 1e-6  # the trip comes later
    assert read_trace(tmp_path / "trip_lsi_trace.csv").f.size == 501
    rep = json.loads((tmp_path / "trip_lsi_report.json").read_text())
    assert rep["sigma_f"] < 1e-6
    eff = load_scenario(tmp_path / "trip_lsi_effective_scenario.json")
    assert eff.horizon == 5.0 and eff.name == "trip_lsi"
    assert (tmp_path / "trip_lsi_frequency.png").stat().st_size > 0
    assert "sigma_f" in capsys.readouterr().out


def test_global_flags_before_subcommand(tmp_path):
    code = main(["--horizon", "2", "--no-figures", "--out-dir", str(tmp_path), "run", "trip_lsi.json"])
    assert code == EXIT_OK
    assert SimulationTrace.from_csv(tmp_path / "trip_lsi_trace.csv").data.shape[0] == 201
    assert not list(tmp_path.glob("*.png"))


def test_seed_and_dt_overrides():
    _, sc = prepare("scenario1_noise.json", seed=7, dt=0.02, horizon=4)
    assert (sc.seed, sc.dt, sc.horizon) == (7, 0.02, 4.0)


def test_missing_case_names_path(tmp_path, capsys):
    sc = write_json(tmp_path / "s.json", {"schema_version": 1, "case": "nowhere/case.json", "horizon": 1})
    assert main(["run", str(sc), "--out-dir", str(tmp_path)]) == EXIT_INPUT
    assert "nowhere/case.json" in capsys.readouterr().err


def test_missing_scenario(tmp_path):
    assert main(["run", str(tmp_path / "absent.json")]) == EXIT_INPUT


@pytest.mark.parametrize("data", [
    {"schema_version": 2},
    {"schema_version": 1, "horizon": -1},
    {"schema_version": 1, "bogus": 1},
    {"schema_version": 1, "schedule": [{"t_start": 0, "target": "load:999", "kind": "step"}]},
])
def test_invalid_scenarios_exit_2(tmp_path, data):
    sc = write_json(tmp_path / "s.json", data)
    assert main(["run", str(sc), "--no-figures", "--out-dir", str(tmp_path)]) == EXIT_INPUT
    assert main(["validate", str(sc)]) == EXIT_INPUT


def test_solver_failure_exit_1_with_partial_trace(tmp_path, capsys):
    sc = write_json(tmp_path / "s.json", {
        "schema_version": 1, "name": "collapse", "horizon": 2.0,
        "schedule": [{"t_start": 0.5, "target": "load:20", "kind": "step", "magnitude": 150.0}]})
    assert main(["run", str(sc), "--no-figures", "--out-dir", str(tmp_path)]) == EXIT_SOLVER
    partial = SimulationTrace.from_csv(tmp_path / "collapse_partial_trace.csv")
    assert partial.t[-1] == pytest.approx(0.49)
    assert "solver failure" in capsys.readouterr().err


def test_validate_case_and_scenarios(capsys):
    assert main(["validate", "ieee39_wind25.json"]) == EXIT_OK
    for name in ("scenario1_noise.json", "scenario2_noise_ramps.json", "trip_lsi.json"):
        assert main(["validate", name]) == EXIT_OK
    assert "valid case" in capsys.readouterr().out


def test_validate_bad_case(tmp_path, case_dict):
    case_dict["branches"][0]["x"] = 0.0
    case_dict["branches"][0]["r"] = 0.0
    assert main(["validate", str(write_json(tmp_path / "c.json", case_dict))]) == EXIT_INPUT
    (tmp_path / "broken.json").write_text("{not json")
    assert main(["validate", str(tmp_path / "broken.json")]) == EXIT_INPUT


def test_compare_writes_paired_outputs(tmp_path):
    code = main(["compare", "scenario1_noise.json", "--horizon", "20", "--out-dir", str(tmp_path)])
    assert code == EXIT_OK
    res = json.loads((tmp_path / "scenario1_noise_compare.json").read_text())
    assert res["noise_identical"] is True
    assert res["sigma_off"] == pytest.approx(res["report_off"]["sigma_f"])
    off = SimulationTrace.from_csv(tmp_path / "scenario1_noise_agc_off_trace.csv")
    on = SimulationTrace.from_csv(tmp_path / "scenario1_noise_agc_on_trace.csv")
    assert off.data.shape == on.data.shape
    assert np.all(off.column("delta_p_agc_pu") == 0)
    assert (tmp_path / "scenario1_noise_compare_hist.png").exists()


def test_compare_without_disturbance_is_identical():
    case, sc = prepare("trip_lsi.json", horizon=5)
    res, off, on = compare_agc(case, sc)
    assert np.array_equal(off.f_coi_hz, on.f_coi_hz)
    assert res.sigma_off == res.sigma_on


def test_kpi_on_constant_trace(tmp_path):
    write_trace(FrequencyTrace.uniform(np.full(2000, 50.0), 1.0), tmp_path / "flat.csv")
    assert main(["kpi", str(tmp_path / "flat.csv"), "--event-t", "10", "--out-dir", str(tmp_path)]) == EXIT_OK
    rep = json.loads((tmp_path / "flat_kpi.json").read_text())
    assert all(rep["passes"].values())


def test_kpi_square_wave_matches_counting(tmp_path):
    f = np.tile([50.0] * 30 + [50.3] * 20 + [49.75] * 10, 10)
    write_trace(FrequencyTrace.uniform(f, 1.0), tmp_path / "sq.csv")
    assert main(["kpi", str(tmp_path / "sq.csv"), "--out-dir", str(tmp_path), "--preset", "CE",
                 "--standard-range", "0.2"]) == EXIT_OK
    rep = json.loads((tmp_path / "sq_kpi.json").read_text())
    assert rep["minutes_above_band"] == pytest.approx(np.count_nonzero(f > 50.2) / 60)
    assert rep["minutes_below_band"] == pytest.approx(np.count_nonzero(f < 49.8) / 60)
    assert rep["pct_within_incentive_band"] == pytest.approx(50.0)


def test_kpi_month_table(tmp_path):
    months = [("01-Aug", 44640, 372), ("02-Sep", 43200, 420), ("03-Oct", 44640, 862),
              ("04-Nov", 43200, 935), ("05-Dec", 44640, 1803), ("06-Jan", 44640, 1135),
              ("07-Feb", 40320, 1066), ("08-Mar", 44640, 1078), ("09-Apr", 43200, 411),
              ("10-May", 44640, 433), ("11-Jun", 43200, 333), ("12-Jul", 44640, 230)]
    rng = np.random.default_rng(2)
    paths = []
    for label, minutes, viol in months:
        f = np.full(minutes, 50.0)
        f[rng.choice(minutes, viol, replace=False)] = 49.85
        p = tmp_path / f"{label}.csv"
        write_trace(FrequencyTrace.uniform(f, 60.0), p)
        paths.append(str(p))
    assert main(["kpi", *paths, "--out-dir", str(tmp_path)]) == EXIT_OK
    agg = json.loads((tmp_path / "kpi_table.json").read_text())
    assert agg["total_minutes"] == 525600
    assert agg["total_violation_minutes"] == 9078
    assert round(agg["pct_within"], 2) == 98.27
    assert "98.27%" in (tmp_path / "kpi_table.txt").read_text()


def test_kpi_missing_trace(tmp_path):
    assert main(["kpi", str(tmp_path / "none.csv")]) == EXIT_INPUT


def test_sweep_k_o_zero_equals_agc_off(tmp_path):
    values = ["0", "10", "25", "50"]
    code = main(["sweep", "scenario2_noise_ramps.json", "--param", "k_o", "--values", *values,
                 "--horizon", "30", "--no-figures", "--out-dir", str(tmp_path)])
    assert code == EXIT_OK
    rows = read_sweep_csv(tmp_path / "scenario2_noise_ramps_sweep_k_o.csv")
    assert len(rows) == len(values)
    assert tuple(rows[0]) == SWEEP_COLUMNS
    case, sc = prepare("scenario2_noise_ramps.json", horizon=30)
    off, _ = simulate(case, sc.with_agc(False))
    assert rows[0]["sigma_f_hz"] == pytest.approx(float(np.std(off.f_coi_hz)), rel=1e-11)


def test_sweep_rows_round_trip(tmp_path):
    case, sc = prepare("scenario1_noise.json", horizon=10)
    rows = sweep(case, sc, "t_sample", [2.0, 4.0])
    from freqquality.cli import write_sweep_csv

    write_sweep_csv(rows, tmp_path / "s.csv")
    back = read_sweep_csv(tmp_path / "s.csv")
    for a, b in zip(rows, back):
        for k in SWEEP_COLUMNS:
            assert b[k] == pytest.approx(a[k], rel=1e-11)


def test_narrow_apc_deadband_does_not_worsen_sigma():
    case, sc = prepare("scenario2_noise_ramps.json", horizon=120)
    wide, narrow = sweep(case, sc, "deadband", [0.2, 0.015])
    assert narrow["sigma_f_hz"] <= wide["sigma_f_hz"]


def test_sweep_rejects_bad_values(tmp_path):
    code = main(["sweep", "scenario1_noise.json", "--param", "t_sample", "--values", "-1",
                 "--horizon", "2", "--out-dir", str(tmp_path)])
    assert code == EXIT_INPUT
