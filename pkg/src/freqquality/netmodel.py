"""Static network data, case-file ingestion and Newton power flow.

All electrical quantities are per unit on ``base_mva`` unless a record
states otherwise (machine and plant parameters are on their own rating).
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

BUS_KINDS = ("slack", "generator", "load")


class CaseError(ValueError):
    """Base class for case-file problems."""


class SchemaError(CaseError):
    """The file does not parse into the case schema."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"schema error in '{field_name}': {message}")


class ValidationError(CaseError):
    """A parsed case violates one of the model invariants."""

    def __init__(self, rule: str, message: str):
        self.rule = rule
        super().__init__(f"validation error [{rule}]: {message}")


class PowerFlowError(RuntimeError):
    def __init__(self, iterations: int, mismatch: float):
        self.iterations = iterations
        self.mismatch = mismatch
        super().__init__(
            f"power flow did not converge after {iterations} iterations "
            f"(max mismatch {mismatch:.3e} pu)"
        )


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    v_init: float = 1.0
    theta_init: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float = 0.0


@dataclass(frozen=True)
class Exciter:
    K_a: float = 200.0
    T_a: float = 0.02
    efd_min: float = 0.0
    efd_max: float = 5.0


@dataclass(frozen=True)
class TurbineGovernor:
    R: float = 0.05
    deadband_hz: float = 0.015
    T_g: float = 0.2
    T_t: float = 0.5
    p_min: float = 0.0
    p_max: float = 1.0


@dataclass(frozen=True)
class Machine:
    """Two-axis synchronous machine; reactances on its own rating."""

    id: int
    bus: int
    rating_mva: float
    p_gen: float
    H: float
    D: float = 0.0
    x_d: float = 1.8
    x_q: float = 1.7
    x_d_prime: float = 0.3
    x_q_prime: float = 0.5
    T_d0_prime: float = 6.0
    T_q0_prime: float = 0.5
    exciter: Exciter = field(default_factory=Exciter)
    governor: TurbineGovernor = field(default_factory=TurbineGovernor)


@dataclass(frozen=True)
class WindPlant:
    """DFIG wind plant aggregated to one machine; pu on ``rating_mva``."""

    id: int
    bus: int
    rating_mva: float
    p_gen: float
    H_w: float = 3.0
    v_rated: float = 12.0
    T_i: float = 0.05
    T_v: float = 0.05
    K_v: float = 10.0
    K_pitch: float = 100.0
    T_pitch: float = 0.5
    T_f: float = 0.1
    R_apc: float = 0.04
    apc_headroom: float = 0.0
    apc_floor: float = 0.5


@dataclass(frozen=True)
class BessUnit:
    id: int
    bus: int
    p_ffr: float
    f_trig: float = 49.8
    delay: float = 0.15
    hysteresis: float = 0.05


@dataclass(frozen=True)
class Load:
    bus: int
    p: float
    q: float


@dataclass(frozen=True)
class PowerSystemCase:
    base_mva: float
    f_nom: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    machines: tuple[Machine, ...] = ()
    wind_plants: tuple[WindPlant, ...] = ()
    bess_units: tuple[BessUnit, ...] = ()
    loads: tuple[Load, ...] = ()
    notes: str = ""

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def bus_index(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    def slack_index(self) -> int:
        return next(k for k, b in enumerate(self.buses) if b.kind == "slack")

    def to_dict(self) -> dict[str, Any]:
        d = {
            "base_mva": self.base_mva,
            "f_nom": self.f_nom,
            "buses": [asdict(b) for b in self.buses],
            "branches": [_branch_to_json(b) for b in self.branches],
            "machines": [asdict(m) for m in self.machines],
            "wind": [asdict(w) for w in self.wind_plants],
            "bess": [asdict(b) for b in self.bess_units],
            "loads": [asdict(ld) for ld in self.loads],
        }
        if self.notes:
            d["notes"] = self.notes
        return d


def _branch_to_json(b: Branch) -> dict[str, Any]:
    d = asdict(b)
    d["from"] = d.pop("from_bus")
    d["to"] = d.pop("to_bus")
    return d


# ---------------------------------------------------------------------------
# parsing


def _record(cls, raw: Any, where: str, renames: dict[str, str] | None = None):
    if not isinstance(raw, dict):
        raise SchemaError(where, "expected an object")
    raw = dict(raw)
    for old, new in (renames or {}).items():
        if old in raw:
            raw[new] = raw.pop(old)
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise SchemaError(f"{where}.{key}", "unknown field")
        if key == "exciter":
            value = _record(Exciter, value, f"{where}.exciter")
        elif key == "governor":
            value = _record(TurbineGovernor, value, f"{where}.governor")
        elif key == "kind":
            if value not in BUS_KINDS:
                raise SchemaError(f"{where}.kind", f"must be one of {BUS_KINDS}")
        elif known[key].type in ("int",):
            if not isinstance(value, int) or isinstance(value, bool):
                raise SchemaError(f"{where}.{key}", "expected an integer")
        elif known[key].type in ("float",):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise SchemaError(f"{where}.{key}", "expected a number")
            value = float(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        missing = [
            f.name
            for f in fields(cls)
            if f.name not in kwargs
            and f.default is MISSING
            and f.default_factory is MISSING
        ]
        name = missing[0] if missing else where
        raise SchemaError(f"{where}.{name}", f"missing required field ({exc})") from None


def case_from_dict(data: dict[str, Any]) -> PowerSystemCase:
    if not isinstance(data, dict):
        raise SchemaError("<root>", "expected a JSON object")
    for key in ("base_mva", "buses", "branches"):
        if key not in data:
            raise SchemaError(key, "missing required field")
    for key in data:
        if key not in ("base_mva", "f_nom", "buses", "branches", "machines",
                       "wind", "bess", "loads", "notes", "schema_version"):
            raise SchemaError(key, "unknown top-level field")
    lists = {}
    for key in ("buses", "branches", "machines", "wind", "bess", "loads"):
        value = data.get(key, [])
        if not isinstance(value, list):
            raise SchemaError(key, "expected a list")
        lists[key] = value
    case = PowerSystemCase(
        base_mva=float(data["base_mva"]),
        f_nom=float(data.get("f_nom", 50.0)),
        buses=tuple(_record(Bus, b, f"buses[{i}]") for i, b in enumerate(lists["buses"])),
        branches=tuple(
            _record(Branch, b, f"branches[{i}]", {"from": "from_bus", "to": "to_bus"})
            for i, b in enumerate(lists["branches"])
        ),
        machines=tuple(_record(Machine, m, f"machines[{i}]") for i, m in enumerate(lists["machines"])),
        wind_plants=tuple(_record(WindPlant, w, f"wind[{i}]") for i, w in enumerate(lists["wind"])),
        bess_units=tuple(_record(BessUnit, b, f"bess[{i}]") for i, b in enumerate(lists["bess"])),
        loads=tuple(_record(Load, ld, f"loads[{i}]") for i, ld in enumerate(lists["loads"])),
        notes=str(data.get("notes", "")),
    )
    validate_case(case)
    return case


def validate_case(case: PowerSystemCase) -> None:
    if case.base_mva <= 0:
        raise ValidationError("base_mva_positive", "base_mva must be > 0")
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValidationError("unique_bus_ids", f"duplicate bus id(s) {dup}")
    n_slack = sum(b.kind == "slack" for b in case.buses)
    if n_slack != 1:
        raise ValidationError("one_slack", f"expected exactly one slack bus, found {n_slack}")
    for b in case.buses:
        if b.v_init <= 0:
            raise ValidationError("v_init_positive", f"bus {b.id} has v_init <= 0")
    known = set(ids)
    for k, br in enumerate(case.branches):
        if br.from_bus not in known or br.to_bus not in known:
            raise ValidationError("branch_endpoints", f"branch {k} references an unknown bus")
        if br.x == 0:
            raise ValidationError("branch_reactance", f"branch {k} has x == 0")
    unreachable = _unreachable_buses(case)
    if unreachable:
        raise ValidationError("connected", f"bus(es) {unreachable} not connected to the network")
    for group, records in (("machines", case.machines), ("wind", case.wind_plants),
                           ("bess", case.bess_units), ("loads", case.loads)):
        for rec in records:
            if rec.bus not in known:
                raise ValidationError("device_bus", f"{group} record on unknown bus {rec.bus}")
    for group, records in (("machines", case.machines), ("wind", case.wind_plants),
                           ("bess", case.bess_units)):
        dev_ids = [r.id for r in records]
        if len(set(dev_ids)) != len(dev_ids):
            raise ValidationError("unique_device_ids", f"duplicate id in {group}")
    for m in case.machines:
        if m.H <= 0 or m.T_d0_prime <= 0 or m.T_q0_prime <= 0:
            raise ValidationError("machine_constants", f"machine {m.id}: H, T'd0, T'q0 must be > 0")
        if not (m.x_d >= m.x_d_prime > 0 and m.x_q >= m.x_q_prime > 0):
            raise ValidationError("machine_reactances", f"machine {m.id}: need x_d >= x'_d > 0 and x_q >= x'_q > 0")
        if m.governor.R <= 0:
            raise ValidationError("droop_positive", f"machine {m.id}: droop R must be > 0")
        if m.rating_mva <= 0:
            raise ValidationError("rating_positive", f"machine {m.id}: rating must be > 0")
    for w in case.wind_plants:
        if w.rating_mva <= 0 or w.H_w <= 0:
            raise ValidationError("wind_constants", f"wind plant {w.id}: rating and H_w must be > 0")
    for b in case.bess_units:
        if b.p_ffr < 0:
            raise ValidationError("bess_power", f"bess {b.id}: p_ffr must be >= 0")


def _unreachable_buses(case: PowerSystemCase) -> list[int]:
    """Breadth-first search from the first bus; returns ids never reached."""
    if not case.buses:
        return []
    adj: dict[int, list[int]] = {b.id: [] for b in case.buses}
    for br in case.branches:
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)
    start = case.buses[0].id
    seen = {start}
    queue = deque([start])
    while queue:
        for nxt in adj[queue.popleft()]:
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return sorted(set(adj) - seen)


def load_case(path: str | Path) -> PowerSystemCase:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError("<root>", f"{path}: invalid JSON ({exc})") from None
    return case_from_dict(data)


def save_case(case: PowerSystemCase, path: str | Path) -> None:
    Path(path).write_text(json.dumps(case.to_dict(), indent=1) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# network


def build_ybus(case: PowerSystemCase) -> np.ndarray:
    """Dense bus admittance matrix (pi-model lines, charging split per end)."""
    idx = case.bus_index()
    n = case.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        i, j = idx[br.from_bus], idx[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b_shunt
        Y[i, i] += ys + ysh
        Y[j, j] += ys + ysh
        Y[i, j] -= ys
        Y[j, i] -= ys
    return Y


def bus_power(Y: np.ndarray, vm: np.ndarray, va: np.ndarray) -> np.ndarray:
    V = vm * np.exp(1j * va)
    return V * np.conj(Y @ V)


def dS_dV(Y: np.ndarray, vm: np.ndarray, va: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Partials of complex bus injections w.r.t. angle and magnitude."""
    V = vm * np.exp(1j * va)
    I = Y @ V
    Vn = V / vm
    dS_dva = 1j * V[:, None] * np.conj(np.diag(I) - Y * V[None, :])
    dS_dvm = V[:, None] * np.conj(Y * Vn[None, :]) + np.diag(np.conj(I) * Vn)
    return dS_dva, dS_dvm


@dataclass
class PowerFlowSolution:
    vm: np.ndarray
    va: np.ndarray
    p: np.ndarray
    q: np.ndarray
    iterations: int
    max_mismatch: float
    p_load: np.ndarray = field(repr=False, default=None)
    q_load: np.ndarray = field(repr=False, default=None)

    def generation(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-bus generated power (net injection plus local load)."""
        return self.p + self.p_load, self.q + self.q_load


def scheduled_injections(case: PowerSystemCase) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    idx = case.bus_index()
    n = case.n_bus
    p_gen = np.zeros(n)
    p_load = np.zeros(n)
    q_load = np.zeros(n)
    for m in case.machines:
        p_gen[idx[m.bus]] += m.p_gen
    for w in case.wind_plants:
        p_gen[idx[w.bus]] += w.p_gen
    for ld in case.loads:
        p_load[idx[ld.bus]] += ld.p
        q_load[idx[ld.bus]] += ld.q
    return p_gen, p_load, q_load


def solve_power_flow(case: PowerSystemCase, tol: float = 1e-10, max_iter: int = 20) -> PowerFlowSolution:
    """Full Newton-Raphson in polar form.

    Generator buses hold |V| at ``v_init``; the slack bus holds |V| and the
    angle reference and absorbs the active-power imbalance.
    """
    Y = build_ybus(case)
    p_gen, p_load, q_load = scheduled_injections(case)
    kinds = np.array([b.kind for b in case.buses])
    vm = np.array([b.v_init for b in case.buses], dtype=float)
    va = np.array([b.theta_init for b in case.buses], dtype=float)
    slack = case.slack_index()
    va = va - va[slack]
    pv = np.flatnonzero(kinds == "generator")
    pq = np.flatnonzero(kinds == "load")
    pvpq = np.concatenate([pv, pq])
    p_spec = p_gen - p_load
    q_spec = -q_load

    def mismatch():
        S = bus_power(Y, vm, va)
        return np.concatenate([S.real[pvpq] - p_spec[pvpq], S.imag[pq] - q_spec[pq]])

    F = mismatch()
    it = 0
    while np.max(np.abs(F), initial=0.0) > tol:
        if it >= max_iter or not np.all(np.isfinite(F)):
            raise PowerFlowError(it, float(np.max(np.abs(F))))
        dva, dvm = dS_dV(Y, vm, va)
        J = np.block([
            [dva.real[np.ix_(pvpq, pvpq)], dvm.real[np.ix_(pvpq, pq)]],
            [dva.imag[np.ix_(pq, pvpq)], dvm.imag[np.ix_(pq, pq)]],
        ])
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            raise PowerFlowError(it, float(np.max(np.abs(F)))) from None
        va[pvpq] += dx[: len(pvpq)]
        vm[pq] += dx[len(pvpq):]
        F = mismatch()
        it += 1
    S = bus_power(Y, vm, va)
    if not np.all(np.isfinite(S)):
        raise PowerFlowError(it, float("nan"))
    return PowerFlowSolution(
        vm=vm, va=va, p=S.real, q=S.imag, iterations=it,
        max_mismatch=float(np.max(np.abs(F), initial=0.0)),
        p_load=p_load, q_load=q_load,
    )
