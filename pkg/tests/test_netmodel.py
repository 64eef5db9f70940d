import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import root

from freqquality.netmodel import (
    PowerFlowError,
    SchemaError,
    ValidationError,
    build_ybus,
    bus_power,
    case_from_dict,
    dS_dV,
    load_case,
    save_case,
    solve_power_flow,
)


def two_bus(p_load=0.0, x=0.1, r=0.0):
    return case_from_dict({
        "base_mva": 100.0,
        "buses": [{"id": 1, "kind": "slack"}, {"id": 2, "kind": "generator"}],
        "branches": [{"from": 1, "to": 2, "r": r, "x": x, "b_shunt": 0.0}],
        "loads": [{"bus": 2, "p": p_load, "q": 0.0}],
    })


def rectangular_power_flow(case):
    """Independent oracle: rectangular voltages, scipy root finder, own Ybus."""
    ids = [b.id for b in case.buses]
    pos = {b: i for i, b in enumerate(ids)}
    n = len(ids)
    G = np.zeros((n, n))
    B = np.zeros((n, n))
    for br in case.branches:
        i, j = pos[br.from_bus], pos[br.to_bus]
        z2 = br.r**2 + br.x**2
        g, b = br.r / z2, -br.x / z2
        for a, c, sign in ((i, i, 1), (j, j, 1), (i, j, -1), (j, i, -1)):
            G[a, c] += sign * g
            B[a, c] += sign * b
        B[i, i] += br.b_shunt / 2
        B[j, j] += br.b_shunt / 2
    p = np.zeros(n)
    q = np.zeros(n)
    for dev in case.machines + case.wind_plants:
        p[pos[dev.bus]] += dev.p_gen
    for ld in case.loads:
        p[pos[ld.bus]] -= ld.p
        q[pos[ld.bus]] -= ld.q
    kinds = [b.kind for b in case.buses]
    vset = np.array([b.v_init for b in case.buses])
    s = kinds.index("slack")

    def equations(z):
        e, f = z[:n], z[n:]
        ir = G @ e - B @ f
        ii = G @ f + B @ e
        pc = e * ir + f * ii
        qc = f * ir - e * ii
        out = np.empty(2 * n)
        for k in range(n):
            if k == s:
                out[k], out[n + k] = e[k] - vset[k], f[k]
            elif kinds[k] == "generator":
                out[k], out[n + k] = pc[k] - p[k], e[k] ** 2 + f[k] ** 2 - vset[k] ** 2
            else:
                out[k], out[n + k] = pc[k] - p[k], qc[k] - q[k]
        return out

    z0 = np.concatenate([vset, np.zeros(n)])
    sol = root(equations, z0, method="hybr", tol=1e-14)
    if np.max(np.abs(equations(sol.x))) > 1e-11:
        sol = root(equations, z0, method="lm", tol=1e-15)
    assert np.max(np.abs(equations(sol.x))) < 1e-11
    e, f = sol.x[:n], sol.x[n:]
    return np.hypot(e, f), np.arctan2(f, e)


def test_bundled_case_shape(case):
    assert case.n_bus == 39
    assert len(case.machines) == 7
    assert len(case.wind_plants) == 3
    assert case.notes  # assumptions are documented in the file


def test_bundled_power_flow_matches_independent_solver(case):
    pf = solve_power_flow(case)
    assert pf.iterations <= 10
    assert pf.max_mismatch < 1e-8
    assert np.all((pf.vm >= 0.9) & (pf.vm <= 1.1))
    vm, va = rectangular_power_flow(case)
    np.testing.assert_allclose(pf.vm, vm, atol=1e-8)
    np.testing.assert_allclose(pf.va, va, atol=1e-8)


def test_two_bus_zero_transfer_is_flat():
    pf = solve_power_flow(two_bus(0.0))
    np.testing.assert_allclose(pf.va, 0.0, atol=1e-12)
    np.testing.assert_allclose(pf.vm, 1.0, atol=1e-12)


def test_two_bus_angle_matches_closed_form():
    pf = solve_power_flow(two_bus(0.5))
    theta12 = pf.va[0] - pf.va[1]
    assert theta12 == pytest.approx(np.arcsin(0.05), abs=1e-10)
    assert theta12 == pytest.approx(0.05002, abs=1e-5)


def test_slack_absorbs_losses():
    pf = solve_power_flow(two_bus(0.5, r=0.02))
    losses = pf.p.sum()
    assert losses > 0
    assert pf.p[0] == pytest.approx(0.5 + losses, abs=1e-10)


def test_non_convergence_reports_mismatch():
    with pytest.raises(PowerFlowError) as err:
        solve_power_flow(two_bus(50.0))  # far beyond the line's transfer limit
    assert err.value.mismatch > 1e-8 or np.isnan(err.value.mismatch)


def test_ybus_symmetric_and_jacobian_matches_differences(case):
    Y = build_ybus(case)
    np.testing.assert_allclose(Y, Y.T)
    pf = solve_power_flow(case)
    dva, dvm = dS_dV(Y, pf.vm, pf.va)
    eps = 1e-7
    for k in (0, 17, 38):
        e = np.zeros(case.n_bus)
        e[k] = eps
        num_a = (bus_power(Y, pf.vm, pf.va + e) - bus_power(Y, pf.vm, pf.va - e)) / (2 * eps)
        num_m = (bus_power(Y, pf.vm + e, pf.va) - bus_power(Y, pf.vm - e, pf.va)) / (2 * eps)
        np.testing.assert_allclose(dva[:, k], num_a, atol=1e-5)
        np.testing.assert_allclose(dvm[:, k], num_m, atol=1e-5)


def test_round_trip_is_identical(case, tmp_path):
    path = tmp_path / "case.json"
    save_case(case, path)
    again = load_case(path)
    assert again == case
    save_case(again, tmp_path / "case2.json")
    assert (tmp_path / "case2.json").read_bytes() == path.read_bytes()


@pytest.mark.parametrize("mutate, rule", [
    (lambda d: d["buses"].append(dict(d["buses"][0])), "unique_bus_ids"),
    (lambda d: d["buses"].append({"id": 999, "kind": "load"}), "connected"),
    (lambda d: d["branches"][0].update(x=0.0), "branch_reactance"),
    (lambda d: d["branches"][0].update({"to": 4242}), "branch_endpoints"),
    (lambda d: d["buses"][0].update(v_init=-1.0), "v_init_positive"),
    (lambda d: [b.update(kind="load") for b in d["buses"] if b["kind"] == "slack"], "one_slack"),
    (lambda d: d["machines"][0]["governor"].update(R=0.0), "droop_positive"),
    (lambda d: d["machines"][0].update(H=0.0), "machine_constants"),
    (lambda d: d["loads"][0].update(bus=4242), "device_bus"),
    (lambda d: d["wind"].append(dict(d["wind"][0])), "unique_device_ids"),
])
def test_validation_rules(case_dict, mutate, rule):
    mutate(case_dict)
    with pytest.raises(ValidationError) as err:
        case_from_dict(case_dict)
    assert err.value.rule == rule


def test_disconnected_bus_detected_by_reachability(case_dict):
    # cut every branch touching bus 2's neighbour 30 -> bus 30 is isolated
    case_dict["branches"] = [b for b in case_dict["branches"] if 30 not in (b["from"], b["to"])]
    with pytest.raises(ValidationError, match="30"):
        case_from_dict(case_dict)


@pytest.mark.parametrize("mutate, field_name", [
    (lambda d: d.update(extra=1), "extra"),
    (lambda d: d["buses"][0].update(kind="pv"), "buses[0].kind"),
    (lambda d: d["branches"][0].update(x="big"), "branches[0].x"),
    (lambda d: d["machines"][0].pop("H"), "machines[0].H"),
    (lambda d: d.pop("buses"), "buses"),
])
def test_schema_errors_name_the_field(case_dict, mutate, field_name):
    mutate(case_dict)
    with pytest.raises(SchemaError) as err:
        case_from_dict(case_dict)
    assert err.value.field == field_name


def test_invalid_json_is_schema_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(SchemaError):
        load_case(p)


def test_missing_file_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_case(tmp_path / "nope.json")


@st.composite
def radial_cases(draw):
    n = draw(st.integers(3, 7))
    buses = [{"id": 1, "kind": "slack"}] + [{"id": i, "kind": "load"} for i in range(2, n + 1)]
    branches, loads = [], []
    for i in range(2, n + 1):
        parent = draw(st.integers(1, i - 1))
        branches.append({"from": parent, "to": i, "r": draw(st.floats(0.001, 0.02)),
                         "x": draw(st.floats(0.01, 0.08)), "b_shunt": draw(st.floats(0.0, 0.1))})
        loads.append({"bus": i, "p": draw(st.floats(0.0, 0.6)), "q": draw(st.floats(-0.1, 0.2))})
    return {"base_mva": 100.0, "buses": buses, "branches": branches, "loads": loads}


@settings(max_examples=40, deadline=None)
@given(radial_cases())
def test_power_flow_residual_property(data):
    case = case_from_dict(data)
    pf = solve_power_flow(case)
    S = bus_power(build_ybus(case), pf.vm, pf.va)
    mismatch = np.abs(S.real[1:] + pf.p_load[1:])
    assert mismatch.max() < 1e-8
    assert np.abs(S.imag[1:] + pf.q_load[1:]).max() < 1e-8
    vm, va = rectangular_power_flow(case)
    np.testing.assert_allclose(pf.vm, vm, atol=1e-8)
