"""Frequency-quality KPIs over uniformly sampled frequency traces.

Dwell times are counted per sample: every sample contributes ``dt`` to
the region its value lies in, with no interpolation at band crossings.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

F_NOM = 50.0


@dataclass
class FrequencyTrace:
    t: np.ndarray
    f: np.ndarray
    dt: float
    events: list = field(default_factory=list)  # (t, label)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.f = np.asarray(self.f, dtype=float)
        if self.t.shape != self.f.shape or self.t.ndim != 1:
            raise ValueError("t and f must be 1-D arrays of equal length")
        if not np.all(np.isfinite(self.f)):
            raise ValueError("frequency samples must be finite")
        if self.t.size > 1:
            steps = np.diff(self.t)
            if np.any(steps <= 0):
                raise ValueError("time stamps must be strictly increasing")
            if np.max(np.abs(steps - self.dt)) > 1e-6 * max(self.dt, 1.0):
                raise ValueError("trace is not uniformly sampled at dt")

    @classmethod
    def uniform(cls, f, dt: float, t0: float = 0.0) -> "FrequencyTrace":
        f = np.asarray(f, dtype=float)
        return cls(t=t0 + dt * np.arange(f.size), f=f, dt=dt)

    @property
    def duration(self) -> float:
        return self.f.size * self.dt


# ---------------------------------------------------------------------------
# thresholds


@dataclass(frozen=True)
class KpiThresholds:
    name: str
    standard_range: float
    max_instantaneous_dev: float
    max_steady_state_dev: float
    time_to_recover: float | None
    recovery_range: float | None
    time_to_restore: float
    restoration_range: float | None
    alert_trigger: float
    max_minutes_outside: float
    incentive_band: float = 0.1
    incentive_target: float = 0.98

    def with_overrides(self, **kw) -> "KpiThresholds":
        d = asdict(self)
        d.update({k: v for k, v in kw.items() if v is not None})
        return KpiThresholds(**d)


PRESETS = {
    "CE": KpiThresholds(
        name="CE", standard_range=0.05, max_instantaneous_dev=0.8, max_steady_state_dev=0.2,
        time_to_recover=None, recovery_range=None, time_to_restore=900.0,
        restoration_range=None, alert_trigger=300.0, max_minutes_outside=15000.0),
    "IE_NI": KpiThresholds(
        name="IE_NI", standard_range=0.2, max_instantaneous_dev=1.0, max_steady_state_dev=0.5,
        time_to_recover=60.0, recovery_range=0.5, time_to_restore=900.0,
        restoration_range=0.2, alert_trigger=600.0, max_minutes_outside=15000.0),
}

# (row label, field, kind) in the order of the parameter table
TABLE_ROWS = (
    ("Standard frequency range", "standard_range", "range"),
    ("Maximum instantaneous frequency deviation", "max_instantaneous_dev", "mhz"),
    ("Maximum steady-state frequency deviation", "max_steady_state_dev", "mhz"),
    ("Time to recover frequency", "time_to_recover", "time"),
    ("Frequency recovery range", "recovery_range", "range"),
    ("Time to restore frequency", "time_to_restore", "time"),
    ("Frequency restoration range", "restoration_range", "range"),
    ("Alert state trigger time", "alert_trigger", "time"),
    ("Maximum number of minutes outside the standard frequency range", "max_minutes_outside", "count"),
)


def _cell(value, kind: str) -> str:
    if value is None:
        return "not used"
    if kind == "range":
        return f"± {round(value * 1000):d} mHz"
    if kind == "mhz":
        return f"{round(value * 1000):d} mHz"
    if kind == "time":
        minutes = value / 60.0
        m = int(minutes) if float(minutes).is_integer() else minutes
        return f"{m} minute" if m == 1 else f"{m} minutes"
    return f"{int(value):,}"


def threshold_table(preset: KpiThresholds) -> list[tuple[str, str]]:
    """Render thresholds as (parameter, cell) rows of the parameter table."""
    return [(label, _cell(getattr(preset, attr), kind)) for label, attr, kind in TABLE_ROWS]


def get_preset(name: str) -> KpiThresholds:
    key = name.upper().replace("/", "_")
    if key not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[key]


# ---------------------------------------------------------------------------
# metrics


def std_dev(trace: FrequencyTrace) -> float:
    if trace.f.size < 2:
        raise ValueError("need at least 2 samples")
    return float(np.std(trace.f))


def dwell_counts(trace: FrequencyTrace, band: float) -> tuple[int, int, int]:
    """Sample counts above, below and inside ``F_NOM +/- band``."""
    if band <= 0:
        raise ValueError("band must be > 0")
    above = int(np.count_nonzero(trace.f > F_NOM + band))
    below = int(np.count_nonzero(trace.f < F_NOM - band))
    return above, below, trace.f.size - above - below


def minutes_outside(trace: FrequencyTrace, band: float) -> tuple[float, float]:
    above, below, _ = dwell_counts(trace, band)
    return above * trace.dt / 60.0, below * trace.dt / 60.0


def percent_within(trace: FrequencyTrace, band: float) -> float:
    """Fraction of time inside the band (0..1)."""
    above, below, inside = dwell_counts(trace, band)
    return inside / trace.f.size


def nadir_zenith(trace: FrequencyTrace) -> tuple[float, float]:
    """(F_NOM - min f, max f - F_NOM), each clipped at zero: both are magnitudes."""
    if trace.f.size == 0:
        raise ValueError("empty trace")
    return max(F_NOM - float(trace.f.min()), 0.0), max(float(trace.f.max()) - F_NOM, 0.0)


def longest_excursion(trace: FrequencyTrace, band: float) -> float:
    """Longest continuous time (s) spent outside ``F_NOM +/- band``."""
    outside = np.abs(trace.f - F_NOM) > band
    if not outside.any():
        return 0.0
    padded = np.concatenate([[0], outside.astype(np.int8), [0]])
    d = np.diff(padded)
    starts, ends = np.flatnonzero(d == 1), np.flatnonzero(d == -1)
    return float(np.max(ends - starts)) * trace.dt


def initial_rocof(trace: FrequencyTrace, event_t: float, window: float = 0.1) -> float:
    """Mean df/dt (Hz/s) over ``window`` seconds starting at ``event_t``.

    A short averaging window keeps the figure free of the first-step
    electromechanical swing, as relay-style RoCoF measurements do.
    """
    k0 = int(np.searchsorted(trace.t, event_t - 1e-9))
    n = max(int(round(window / trace.dt)), 1)
    if k0 + n >= trace.f.size:
        raise ValueError("trace too short for the RoCoF window")
    return float((trace.f[k0 + n] - trace.f[k0]) / (n * trace.dt))


def _sustained_entry(inside: np.ndarray, hold: int) -> int | None:
    """First index i with inside[i : i+hold+1] all true (truncated at the end)."""
    n = inside.size
    bad = np.concatenate([[0], np.cumsum(~inside)])
    i = np.arange(n)
    j = np.minimum(i + hold + 1, n)
    ok = inside & (bad[j] - bad[i] == 0)
    hits = np.flatnonzero(ok)
    return int(hits[0]) if hits.size else None


@dataclass
class EventRecord:
    event_t: float
    nadir_dev: float
    time_to_recover: float | None
    time_to_restore: float | None
    steady_state_dev: float
    restored: bool
    passes: dict = field(default_factory=dict)
    rocof_hz_s: float = 0.0


def event_recovery_metrics(trace: FrequencyTrace, event_t: float, thresholds: KpiThresholds,
                           hold: float = 10.0, ss_window: float = 60.0) -> EventRecord:
    """Nadir, recovery/restoration times and steady-state deviation after an event.

    Recovery and restoration are the first re-entries into the respective
    band that then last at least ``hold`` seconds. Without a configured
    restoration range the standard range is used.
    """
    if not trace.t[0] <= event_t <= trace.t[-1]:
        raise ValueError("event time outside trace")
    if trace.t[-1] - event_t < thresholds.time_to_restore - trace.dt / 2:
        raise ValueError("trace must extend at least time_to_restore past the event")
    k0 = int(np.searchsorted(trace.t, event_t - 1e-9))
    f = trace.f[k0:]
    t = trace.t[k0:]
    dev = f - F_NOM
    hold_n = int(round(hold / trace.dt))
    nadir = max(-float(dev.min()), 0.0)

    ttr = None
    if thresholds.recovery_range is not None:
        k = _sustained_entry(np.abs(dev) <= thresholds.recovery_range, hold_n)
        ttr = None if k is None else float(t[k] - event_t)
    band = thresholds.restoration_range or thresholds.standard_range
    k = _sustained_entry(np.abs(dev) <= band, hold_n)
    restored = k is not None
    tts = float(t[k] - event_t) if restored else None
    end = k if restored else dev.size
    w = max(int(round(ss_window / trace.dt)), 1)
    window = dev[max(end - w, 0): end] if end > 0 else dev[:1]
    ssd = float(np.mean(window))

    passes = {
        "restore": restored and tts <= thresholds.time_to_restore,
        "steady_state": abs(ssd) <= thresholds.max_steady_state_dev,
        "instantaneous": nadir <= thresholds.max_instantaneous_dev,
    }
    if thresholds.time_to_recover is not None:
        passes["recover"] = ttr is not None and ttr <= thresholds.time_to_recover
    return EventRecord(event_t, nadir, ttr, tts, ssd, restored, passes,
                       rocof_hz_s=initial_rocof(trace, event_t))


@dataclass
class KpiReport:
    preset: str
    duration_s: float
    sigma_f: float
    minutes_above_band: float
    minutes_below_band: float
    nadir_dev: float
    zenith_dev: float
    pct_within_incentive_band: float
    incentive_minutes_outside: float
    longest_excursion_s: float
    events: list[EventRecord]
    passes: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def to_text(self) -> str:
        rows = [
            ("preset", self.preset),
            ("duration (s)", f"{self.duration_s:.2f}"),
            ("standard deviation (Hz)", f"{self.sigma_f:.6f}"),
            ("minutes above standard range", f"{self.minutes_above_band:.3f}"),
            ("minutes below standard range", f"{self.minutes_below_band:.3f}"),
            ("max downward deviation (Hz)", f"{self.nadir_dev:.4f}"),
            ("max upward deviation (Hz)", f"{self.zenith_dev:.4f}"),
            ("time within incentive band (%)", f"{self.pct_within_incentive_band:.3f}"),
            ("longest excursion (s)", f"{self.longest_excursion_s:.2f}"),
        ]
        for ev in self.events:
            rows.append((f"event @ {ev.event_t:g} s nadir (Hz)", f"{ev.nadir_dev:.4f}"))
            rows.append(("  initial RoCoF (Hz/s)", f"{ev.rocof_hz_s:+.4f}"))
            rows.append(("  time to recover (s)", "n/a" if ev.time_to_recover is None else f"{ev.time_to_recover:.2f}"))
            rows.append(("  time to restore (s)", "not achieved" if ev.time_to_restore is None else f"{ev.time_to_restore:.2f}"))
            rows.append(("  steady-state deviation (Hz)", f"{ev.steady_state_dev:+.5f}"))
        rows += [(f"pass: {k}", "yes" if v else "NO") for k, v in self.passes.items()]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{a:<{width}}  {b}" for a, b in rows)


def kpi_report(trace: FrequencyTrace, thresholds: KpiThresholds,
               event_times: list[float] = (), hold: float = 10.0) -> KpiReport:
    above, below = minutes_outside(trace, thresholds.standard_range)
    nadir, zenith = nadir_zenith(trace)
    frac = percent_within(trace, thresholds.incentive_band)
    longest = longest_excursion(trace, thresholds.standard_range)
    events = [event_recovery_metrics(trace, t, thresholds, hold=hold) for t in event_times]
    ia, ib = minutes_outside(trace, thresholds.incentive_band)
    passes = {
        "instantaneous_deviation": max(nadir, zenith) <= thresholds.max_instantaneous_dev,
        "minutes_outside_standard_range": above + below <= thresholds.max_minutes_outside,
        "incentive_band": frac >= thresholds.incentive_target,
        "alert_trigger": longest < thresholds.alert_trigger,
    }
    for ev in events:
        for k, v in ev.passes.items():
            passes[f"event@{ev.event_t:g}:{k}"] = v
    return KpiReport(
        preset=thresholds.name, duration_s=trace.duration, sigma_f=std_dev(trace),
        minutes_above_band=above, minutes_below_band=below, nadir_dev=nadir, zenith_dev=zenith,
        pct_within_incentive_band=100.0 * frac, incentive_minutes_outside=ia + ib,
        longest_excursion_s=longest, events=events, passes=passes,
    )


# ---------------------------------------------------------------------------
# monthly aggregation


@dataclass
class MonthRecord:
    label: str
    minutes: float
    violation_minutes: float


def month_record(label: str, trace: FrequencyTrace, band: float = 0.1) -> MonthRecord:
    above, below = minutes_outside(trace, band)
    return MonthRecord(label, trace.duration / 60.0, above + below)


def aggregate_months(records: list[MonthRecord]) -> dict:
    total = sum(r.minutes for r in records)
    viol = sum(r.violation_minutes for r in records)
    return {
        "months": [asdict(r) for r in records],
        "total_minutes": total,
        "total_violation_minutes": viol,
        "pct_within": 100.0 * (total - viol) / total if total else float("nan"),
    }


def _num(v: float) -> str:
    return f"{int(round(v)):,}" if abs(v - round(v)) < 1e-9 else f"{v:,.2f}"


def format_month_table(records: list[MonthRecord]) -> str:
    agg = aggregate_months(records)
    rows = [("Month", "Minutes", "KPI Violation Minutes")]
    rows += [(r.label, _num(r.minutes), _num(r.violation_minutes)) for r in records]
    rows.append((f"Total minutes ({len(records)} months)", _num(agg["total_minutes"]),
                 _num(agg["total_violation_minutes"])))
    rows.append(("Time within KPI limits", "", f"{agg['pct_within']:.2f}%"))
    w0 = max(len(r[0]) for r in rows)
    w1 = max(len(r[1]) for r in rows)
    w2 = max(len(r[2]) for r in rows)
    lines = [f"{a:<{w0}}  {b:>{w1}}  {c:>{w2}}" for a, b, c in rows]
    rule = "-" * len(lines[0])
    return "\n".join([lines[0], rule, *lines[1:-2], rule, lines[-2], rule, lines[-1]])


# ---------------------------------------------------------------------------
# trace files


def read_trace(path: str | Path) -> FrequencyTrace:
    """Read a simulator trace (``f_coi_hz``) or a two-column ``t,f_hz`` file."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [r for r in reader if r]
    if "t" not in header:
        raise ValueError(f"{path}: no 't' column")
    fcol = "f_coi_hz" if "f_coi_hz" in header else "f_hz" if "f_hz" in header else None
    if fcol is None:
        raise ValueError(f"{path}: need an 'f_coi_hz' or 'f_hz' column")
    data = np.array(rows, dtype=float)
    t = data[:, header.index("t")]
    f = data[:, header.index(fcol)]
    dt = float(t[1] - t[0]) if t.size > 1 else 1.0
    return FrequencyTrace(t=t, f=f, dt=dt)


def write_trace(trace: FrequencyTrace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "f_hz"])
        for t, f in zip(trace.t, trace.f):
            w.writerow([f"{t:.12g}", f"{f:.12g}"])
