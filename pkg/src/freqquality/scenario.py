"""Scenario files: horizon, seed, noise, perturbations, AGC and APC settings."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

from freqquality.devices import APC_DEADBANDS
from freqquality.stochastic import PerturbationSchedule

SCHEMA_VERSION = 1
DATA_DIR = Path(__file__).parent / "data"


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseConfig:
    enabled: bool = False
    load_alpha: float = 0.5
    load_std: float = 0.01
    wind_alpha: float = 0.5
    wind_std: float = 0.15
    # per-device overrides: {"load:4": {"alpha": .., "std": ..}}
    overrides: dict = field(default_factory=dict)


@dataclass(frozen=True)
class AgcConfig:
    enabled: bool = False
    k_o: float = 25.0
    t_sample_s: float = 4.0
    dp_min: float = -0.5
    dp_max: float = 0.5
    participants: tuple = ()
    share_rule: str = "droop"


@dataclass(frozen=True)
class Scenario:
    case_path: str = "ieee39_wind25.json"
    name: str = "scenario"
    horizon: float = 300.0
    dt: float = 0.01
    seed: int = 0
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    schedule: PerturbationSchedule = field(default_factory=PerturbationSchedule)
    agc: AgcConfig = field(default_factory=AgcConfig)
    apc_enabled: bool = False
    apc_deadband: float = 0.2
    outputs: dict = field(default_factory=dict)
    kpi_preset: str = "IE_NI"
    event_t: float | None = None
    base_dir: str = "."

    def with_agc(self, enabled: bool | None = None, **changes) -> "Scenario":
        if enabled is not None:
            changes["enabled"] = enabled
        return replace(self, agc=replace(self.agc, **changes))

    def resolve_case_path(self) -> Path:
        p = Path(self.case_path)
        if not p.is_absolute():
            local = Path(self.base_dir) / p
            if local.exists():
                return local
            bundled = DATA_DIR / p
            if bundled.exists():
                return bundled
            return local
        return p


def _check(cond: bool, where: str, msg: str):
    if not cond:
        raise ScenarioError(f"scenario field '{where}': {msg}")


def scenario_from_dict(data: dict[str, Any], base_dir: str | Path = ".") -> Scenario:
    _check(isinstance(data, dict), "<root>", "expected an object")
    version = data.get("schema_version", SCHEMA_VERSION)
    _check(version == SCHEMA_VERSION, "schema_version", f"unsupported version {version}")
    known = {"schema_version", "name", "case", "horizon", "dt", "seed", "noise", "schedule",
             "agc", "apc_enabled", "apc_deadband", "outputs", "kpi_preset", "event_t", "description"}
    for key in data:
        _check(key in known, key, "unknown field")

    noise_raw = data.get("noise", {})
    _check(isinstance(noise_raw, dict), "noise", "expected an object")
    try:
        noise = NoiseConfig(**noise_raw)
    except TypeError as exc:
        raise ScenarioError(f"scenario field 'noise': {exc}") from None
    _check(noise.load_alpha > 0 and noise.wind_alpha > 0, "noise", "alpha must be > 0")
    _check(noise.load_std >= 0 and noise.wind_std >= 0, "noise", "std must be >= 0")

    agc_raw = dict(data.get("agc", {}))
    if "participants" in agc_raw:
        agc_raw["participants"] = tuple(agc_raw["participants"])
    try:
        agc = AgcConfig(**agc_raw)
    except TypeError as exc:
        raise ScenarioError(f"scenario field 'agc': {exc}") from None

    try:
        schedule = PerturbationSchedule.from_list(data.get("schedule", []))
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"scenario field 'schedule': {exc}") from None

    scenario = Scenario(
        case_path=str(data.get("case", "ieee39_wind25.json")),
        name=str(data.get("name", "scenario")),
        horizon=float(data.get("horizon", 300.0)),
        dt=float(data.get("dt", 0.01)),
        seed=int(data.get("seed", 0)),
        noise=noise,
        schedule=schedule,
        agc=agc,
        apc_enabled=bool(data.get("apc_enabled", False)),
        apc_deadband=float(data.get("apc_deadband", 0.2)),
        outputs=dict(data.get("outputs", {})),
        kpi_preset=str(data.get("kpi_preset", "IE_NI")),
        event_t=None if data.get("event_t") is None else float(data["event_t"]),
        base_dir=str(base_dir),
    )
    validate_scenario(scenario)
    return scenario


def validate_scenario(s: Scenario, case=None) -> None:
    _check(s.horizon > 0, "horizon", "must be > 0")
    _check(s.dt > 0 and s.horizon >= s.dt, "dt", "need 0 < dt <= horizon")
    _check(s.apc_deadband in APC_DEADBANDS, "apc_deadband", f"must be one of {APC_DEADBANDS}")
    _check(s.kpi_preset in ("IE_NI", "CE"), "kpi_preset", "must be IE_NI or CE")
    _check(s.agc.t_sample_s > 0, "agc.t_sample_s", "must be > 0")
    _check(s.agc.k_o >= 0, "agc.k_o", "must be >= 0")
    _check(s.agc.dp_min <= s.agc.dp_max, "agc.dp_min", "must not exceed dp_max")
    if case is None:
        return
    known = {f"load:{ld.bus}" for ld in case.loads}
    known |= {f"wind:{w.id}" for w in case.wind_plants}
    known |= {f"machine:{m.id}" for m in case.machines}
    for target in s.schedule.targets():
        _check(target in known, "schedule", f"unknown device {target!r}")
    for key in s.noise.overrides:
        _check(key in known, "noise.overrides", f"unknown device {key!r}")
    ids = {m.id for m in case.machines}
    for pid in s.agc.participants:
        _check(pid in ids, "agc.participants", f"unknown machine id {pid}")


def scenario_to_dict(s: Scenario) -> dict[str, Any]:
    """Inverse of :func:`scenario_from_dict` (``base_dir`` is not stored)."""
    agc = asdict(s.agc)
    agc["participants"] = list(agc["participants"])
    return {
        "schema_version": SCHEMA_VERSION,
        "name": s.name,
        "case": s.case_path,
        "horizon": s.horizon,
        "dt": s.dt,
        "seed": s.seed,
        "noise": asdict(s.noise),
        "schedule": [asdict(ev) for ev in s.schedule.events],
        "agc": agc,
        "apc_enabled": s.apc_enabled,
        "apc_deadband": s.apc_deadband,
        "outputs": dict(s.outputs),
        "kpi_preset": s.kpi_preset,
        "event_t": s.event_t,
    }


def save_scenario(s: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(s), indent=1) + "\n", encoding="utf-8")


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON ({exc})") from None
    return scenario_from_dict(data, base_dir=path.parent)


def bundled_scenario(name: str) -> Path:
    return DATA_DIR / name
