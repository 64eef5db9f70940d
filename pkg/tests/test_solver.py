from dataclasses import replace

import numpy as np
import pytest

from freqquality.netmodel import build_ybus, case_from_dict, load_case
from freqquality.scenario import AgcConfig, NoiseConfig, Scenario, bundled_scenario, load_scenario
from freqquality.solver import (
    CoiError,
    InitializationError,
    Simulation,
    SolverConfig,
    StepError,
    coi_frequency,
    integrate_dae,
    run,
)
from freqquality.stochastic import Event, PerturbationSchedule

NOISE = NoiseConfig(enabled=True)


def trip_scenario(t=5.0, horizon=20.0, **kw):
    return Scenario(horizon=horizon, schedule=PerturbationSchedule([Event(t, "machine:3", "trip")]), **kw)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(dt=0.0)
    with pytest.raises(ValueError):
        SolverConfig(dt=0.1, horizon=0.05)
    assert SolverConfig(dt=0.01, horizon=300.0).n_steps == 30000


# -- residual assembly ---------------------------------------------------------

@pytest.mark.parametrize("apc", [False, True])
def test_compiled_residual_matches_device_assembly(case, apc):
    sim = Simulation(case, Scenario(horizon=1.0, apc_enabled=apc, apc_deadband=0.015))
    m, s = sim.model, sim.state
    rng = np.random.default_rng(1)
    u = s.u
    u.in_service = u.in_service.copy()
    u.in_service[4] = 0.0
    u.dp_agc = rng.normal(0, 0.05, m.nm)
    u.p_inject = rng.normal(0, 0.1, m.nb)
    for _ in range(5):
        x = s.x * (1 + rng.normal(0, 0.02, m.nx))
        y = s.y + rng.normal(0, 0.02, m.ny)
        x[m.ix["fm"]] = 1 + rng.normal(0, 0.005, m.nw)
        f, g, w = m.evaluate(x, y, u)
        fr, gr, (_, wr, _) = m.evaluate_reference(x, y, u)
        np.testing.assert_allclose(f, fr, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(g, gr, rtol=1e-10, atol=1e-10)
        assert w == pytest.approx(wr, rel=1e-14)


def test_initial_residual_is_tiny(case):
    sim = Simulation(case, Scenario(horizon=1.0))
    f, g, _ = sim.model.evaluate_reference(sim.state.x, sim.state.y, sim.state.u)
    assert np.max(np.abs(f)) < 1e-8
    assert np.max(np.abs(g)) < 1e-8


# -- integration scheme --------------------------------------------------------

def test_trapezoid_reproduces_exponential():
    xs, _ = integrate_dae(lambda x, y: -x, lambda x, y: np.zeros(0),
                          lambda x, y: (-np.eye(1), np.zeros((1, 0)), np.zeros((0, 1)), np.zeros((0, 0))),
                          [1.0], np.zeros(0), 0.01, 100)
    assert xs[-1, 0] == pytest.approx(np.exp(-1.0), abs=1e-5)


def test_trapezoid_index1_dae():
    # x' = -y, 0 = y - 2x  =>  x = exp(-2t)
    xs, ys = integrate_dae(lambda x, y: -y, lambda x, y: y - 2 * x,
                           lambda x, y: (np.zeros((1, 1)), -np.eye(1), -2 * np.eye(1), np.eye(1)),
                           [1.0], [2.0], 0.001, 500)
    assert xs[-1, 0] == pytest.approx(np.exp(-1.0), abs=1e-6)
    np.testing.assert_allclose(ys[:, 0], 2 * xs[:, 0], atol=1e-10)


def test_stepper_matches_plain_trapezoid_after_trip(case_dict):
    case_dict["bess"] = []
    case = case_from_dict(case_dict)
    sim = Simulation(case, Scenario(horizon=2.0))
    sim.apply_trip(3)
    sim._resolve_algebraic()
    m, u = sim.model, sim.state.u
    xs, ys = integrate_dae(lambda x, y: m.evaluate_reference(x, y, u)[0],
                           lambda x, y: m.evaluate_reference(x, y, u)[1],
                           lambda x, y: m.jacobian(x, y, u),
                           sim.state.x, sim.state.y, 0.01, 200)
    omega_ix = m.ix["omega"]
    for k in range(1, 201):
        st = sim.step()
        np.testing.assert_allclose(st.x[omega_ix], xs[k, omega_ix], atol=1e-8)
    assert np.max(np.abs(st.y - ys[-1])) < 1e-6
    assert np.max(np.abs(st.x[omega_ix] - 1)) > 1e-4  # the trip actually moved something


def test_equilibrium_is_a_fixed_point(case):
    sim = Simulation(case, Scenario(horizon=1.0))
    x0, y0 = sim.state.x.copy(), sim.state.y.copy()
    for _ in range(20):
        st = sim.step()
        assert np.max(np.abs(st.x - x0)) < 1e-10
        assert np.max(np.abs(st.y - y0)) < 1e-10


def test_flat_frequency_without_disturbance(case):
    tr = run(case, Scenario(horizon=100.0))
    assert np.max(np.abs(tr.f_coi_hz - 50.0)) < 1e-6


# -- events and bookkeeping ----------------------------------------------------

def test_trip_removes_machine_and_keeps_algebraic_consistency(case):
    sim = Simulation(case, trip_scenario(t=0.5, horizon=2.0), SolverConfig(horizon=2.0, check_algebraic=True))
    for _ in range(60):
        st = sim.step()
    i = sim._machine_pos[3]
    assert st.u.in_service[i] == 0.0
    _, g, (pe, _, _) = sim.model.evaluate_reference(st.x, st.y, st.u)
    assert pe[i] == 0.0
    assert np.max(np.abs(g)) < 1e-8


def test_power_balance_every_step(case):
    """Generation = load + losses, with losses computed from bus voltages alone."""
    sc = trip_scenario(t=1.0, horizon=3.0, noise=NOISE)
    sim = Simulation(case, sc)
    Y = build_ybus(case)
    nb = sim.model.nb
    worst = 0.0
    for _ in range(300):
        st = sim.step()
        _, _, (pe, _, pw) = sim.model.evaluate_reference(st.x, st.y, st.u)
        V = st.y[nb:] * np.exp(1j * st.y[:nb])
        losses = float(np.sum((V * np.conj(Y @ V)).real))
        gen = pe.sum() + pw.sum() + st.u.p_inject.sum()
        worst = max(worst, abs(gen - st.u.p_load.sum() - losses))
    assert worst < 1e-6


def test_algebraic_consistency_through_noisy_run(case):
    sc = trip_scenario(t=3.0, horizon=8.0, noise=NOISE, agc=AgcConfig(enabled=True, t_sample_s=1.0))
    tr = Simulation(case, sc, SolverConfig(horizon=8.0, check_algebraic=True)).run()
    assert tr.data.shape[0] == 801


def test_identical_inputs_give_identical_traces(case):
    sc = Scenario(horizon=20.0, noise=NOISE, seed=4, agc=AgcConfig(enabled=True, k_o=50))
    a, b = run(case, sc), run(case, sc)
    assert np.array_equal(a.data, b.data)
    c = run(case, replace(sc, seed=5))
    assert not np.array_equal(a.data, c.data)


def test_zero_gain_agc_equals_agc_off(case):
    base = load_scenario(bundled_scenario("scenario2_noise_ramps.json"))
    base = replace(base, horizon=40.0)
    off = run(case, base.with_agc(False))
    zero = run(case, base.with_agc(True, k_o=0.0))
    assert np.array_equal(off.f_coi_hz, zero.f_coi_hz)


def test_step_failure_keeps_partial_trace(case):
    sc = Scenario(horizon=1.0, noise=NOISE)
    sim = Simulation(case, sc, SolverConfig(horizon=1.0, newton_max_iter=0))
    with pytest.raises(StepError) as info:
        sim.run()
    assert info.value.t == pytest.approx(0.01)
    assert info.value.trace.data.shape[0] == 1
    assert info.value.residual > 0


def test_initialization_limit_violation(case_dict):
    case_dict["machines"][0]["governor"]["p_max"] = 0.1
    with pytest.raises(InitializationError, match="machine 1"):
        Simulation(case_from_dict(case_dict), Scenario(horizon=1.0))


def test_initialization_exciter_violation(case_dict):
    case_dict["machines"][2]["exciter"]["efd_max"] = 0.5
    with pytest.raises(InitializationError, match="machine 3"):
        Simulation(case_from_dict(case_dict), Scenario(horizon=1.0))


# -- centre of inertia ----------------------------------------------------------

def test_coi_weighting(case):
    sim = Simulation(case, Scenario(horizon=1.0))
    m, st = sim.model, sim.state
    assert coi_frequency(st, m) == pytest.approx(1.0, abs=1e-15)
    rng = np.random.default_rng(0)
    x = st.x.copy()
    omega = 1 + rng.normal(0, 0.002, m.nm)
    x[m.ix["omega"]] = omega
    hs = np.array([mc.H * mc.rating_mva for mc in case.machines])
    assert m.coi(x, np.ones(m.nm)) == pytest.approx(np.average(omega, weights=hs), rel=1e-14)
    live = np.ones(m.nm)
    live[[1, 6]] = 0
    assert m.coi(x, live) == pytest.approx(np.average(omega[live > 0], weights=hs[live > 0]), rel=1e-14)
    with pytest.raises(CoiError):
        m.coi(x, np.zeros(m.nm))


def test_coi_two_machine_example(case_dict):
    m0, m1 = case_dict["machines"][:2]
    m1["H"] = m0["H"] * m0["rating_mva"] / (2 * m1["rating_mva"])  # H1 S1 = 2 H2 S2
    sim = Simulation(case_from_dict(case_dict), Scenario(horizon=1.0))
    m = sim.model
    live = np.zeros(m.nm)
    live[[0, 1]] = 1
    x = sim.state.x.copy()
    x[m.ix["omega"][0]], x[m.ix["omega"][1]] = 1.002, 0.999
    assert m.coi(x, live) == pytest.approx(1.001, rel=1e-14)


# -- AGC in closed loop ---------------------------------------------------------

def load_step_scenario(agc: bool, horizon=610.0):
    case = load_case(bundled_scenario("scenario1_noise.json").parent / "ieee39_wind25.json")
    events = [Event(10.0, f"load:{ld.bus}", "step", 0.02 * ld.p) for ld in case.loads]
    return case, Scenario(horizon=horizon, schedule=PerturbationSchedule(events),
                          agc=AgcConfig(enabled=agc, k_o=25.0, dp_min=-2.0, dp_max=2.0))


@pytest.mark.slow
def test_agc_restores_two_percent_load_step():
    case, sc_on = load_step_scenario(True)
    _, sc_off = load_step_scenario(False)
    on, off = run(case, sc_on), run(case, sc_off)
    err_on = abs(on.f_coi_hz[-1] / 50 - 1)
    err_off = abs(off.f_coi_hz[-1] / 50 - 1)
    assert err_on < 1e-4
    assert err_off > 10 * max(err_on, 1e-6)
    # restored well inside ten minutes of the step
    outside = np.flatnonzero(np.abs(on.f_coi_hz / 50 - 1) >= 1e-4)
    assert on.t[outside[-1]] < 10.0 + 600.0


def test_agc_shares_in_closed_loop(case):
    sc = trip_scenario(t=6.0, horizon=20.0, noise=NOISE,
                       agc=AgcConfig(enabled=True, k_o=50.0, t_sample_s=2.0, dp_min=-5, dp_max=5))
    sim = Simulation(case, sc, SolverConfig(horizon=20.0, record_diagnostics=True))
    tr = sim.run()
    d = tr.diagnostics
    shares, dp, live = d["shares"], d["dp"], d["in_service"]
    droop = sim.model.droop
    sample_steps = [k for k in range(1, shares.shape[0]) if k % 200 == 0]
    trip_step = 600
    for k in range(1, shares.shape[0]):
        if k in sample_steps:
            s = shares[k]
            assert s.sum() == pytest.approx(dp[k], rel=1e-12, abs=1e-15)
            alive = live[k] > 0
            np.testing.assert_allclose(s[alive], dp[k] * droop[alive] / droop[alive].sum(), rtol=1e-12)
            assert np.all(s[~alive] == 0)
        elif k != trip_step:
            assert np.array_equal(shares[k], shares[k - 1])
    assert np.any(shares[-1] != 0)
    # the held value shows up in the trace column
    np.testing.assert_allclose(tr.column("delta_p_agc_pu")[-1], shares[-1].sum(), rtol=1e-12)


def test_device_limits_respected_during_trip(case):
    sc = trip_scenario(t=1.0, horizon=30.0)
    sim = Simulation(case, sc, SolverConfig(horizon=30.0, record_diagnostics=True))
    d = sim.run().diagnostics
    assert np.all(d["p_m"] <= sim.model.p_max + 1e-9)
    assert np.all(d["p_m"] >= sim.model.p_min - 1e-9)
    assert np.all(d["p_wind"] <= sim.model.w_scale * 1.0 + 1e-6)
    assert np.all((d["beta"] >= -1e-9) & (d["beta"] <= 30 + 1e-9))


def test_halving_dt_on_trip(case):
    sc = trip_scenario(t=2.0, horizon=30.0)
    a = run(case, sc)
    b = run(case, replace(sc, dt=0.005))
    assert np.max(np.abs(a.f_coi_hz - b.f_coi_hz[::2])) / 50 < 1e-4


def test_trace_csv_round_trip(case, tmp_path):
    tr = run(case, Scenario(horizon=2.0, noise=NOISE))
    tr.to_csv(tmp_path / "x.csv")
    from freqquality.solver import SimulationTrace

    back = SimulationTrace.from_csv(tmp_path / "x.csv")
    assert back.columns == tr.columns
    assert back.columns[:3] == ["t", "f_coi_hz", "delta_p_agc_pu"]
    np.testing.assert_allclose(back.data, tr.data, rtol=1e-11, atol=1e-12)
