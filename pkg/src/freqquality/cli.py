"""Command-line front end: run, compare, kpi, sweep and validate.

Exit codes: 0 success, 1 solver failure, 2 input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from freqquality import __version__
from freqquality.kpi import (
    KpiReport,
    FrequencyTrace,
    format_month_table,
    aggregate_months,
    get_preset,
    kpi_report,
    month_record,
    read_trace,
)
from freqquality.netmodel import CaseError, PowerFlowError, load_case, validate_case
from freqquality.scenario import (
    DATA_DIR,
    ScenarioError,
    Scenario,
    load_scenario,
    save_scenario,
    validate_scenario,
)
from freqquality.solver import CoiError, InitializationError, Simulation, SimulationTrace, StepError

log = logging.getLogger("freqquality")

EXIT_OK, EXIT_SOLVER, EXIT_INPUT = 0, 1, 2
SWEEP_PARAMS = ("k_o", "t_sample", "deadband")


class InputError(Exception):
    """Bad file, path or argument; maps to exit code 2."""


# ---------------------------------------------------------------------------
# library-level helpers (also used by the tests)


def resolve_scenario_path(name: str | Path) -> Path:
    """A scenario path as given, or the bundled file of that name."""
    p = Path(name)
    if p.exists():
        return p
    bundled = DATA_DIR / p.name
    if p.parent == Path(".") and bundled.exists():
        return bundled
    raise InputError(f"scenario file not found: {p}")


def prepare(scenario_path, seed=None, dt=None, horizon=None):
    """Load a scenario plus its case, apply flag overrides and cross-validate."""
    try:
        sc = load_scenario(resolve_scenario_path(scenario_path))
    except ScenarioError as exc:
        raise InputError(str(exc)) from None
    changes = {k: v for k, v in (("seed", seed), ("dt", dt), ("horizon", horizon)) if v is not None}
    sc = replace(sc, **changes)
    case_path = sc.resolve_case_path()
    if not case_path.exists():
        raise InputError(f"case file not found: {case_path}")
    try:
        case = load_case(case_path)
        validate_scenario(sc, case)
    except (CaseError, ScenarioError) as exc:
        raise InputError(str(exc)) from None
    return case, sc


def simulate(case, scenario: Scenario) -> tuple[SimulationTrace, str]:
    """Run one scenario; returns the trace and the digest of its noise path."""
    sim = Simulation(case, scenario)
    trace = sim.run()
    return trace, sim.noise_digest()


def _simulate_task(args):
    return simulate(*args)


def run_many(tasks: list[tuple], jobs: int = 1) -> list[tuple[SimulationTrace, str]]:
    """Run independent (case, scenario) tasks, optionally in worker processes."""
    if jobs <= 1 or len(tasks) <= 1:
        return [simulate(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_simulate_task, tasks))


def report_for(trace: SimulationTrace, scenario: Scenario, preset: str | None = None) -> KpiReport:
    thresholds = get_preset(preset or scenario.kpi_preset)
    ft = trace.frequency_trace()
    events = []
    if scenario.event_t is not None:
        if ft.t[-1] - scenario.event_t >= thresholds.time_to_restore - ft.dt / 2:
            events = [scenario.event_t]
        else:
            log.warning("horizon too short for event metrics (needs %.0f s after the event)",
                        thresholds.time_to_restore)
    return kpi_report(ft, thresholds, events)


@dataclass
class ComparisonResult:
    scenario: str
    seed: int
    sigma_off: float
    sigma_on: float
    reduction: float  # 1 - sigma_on / sigma_off
    noise_identical: bool
    report_off: dict
    report_on: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        rows = [
            ("", "AGC off", "AGC on"),
            ("std of frequency (Hz)", f"{self.sigma_off:.5f}", f"{self.sigma_on:.5f}"),
            ("min above standard range", f"{self.report_off['minutes_above_band']:.3f}",
             f"{self.report_on['minutes_above_band']:.3f}"),
            ("min below standard range", f"{self.report_off['minutes_below_band']:.3f}",
             f"{self.report_on['minutes_below_band']:.3f}"),
            ("within incentive band (%)", f"{self.report_off['pct_within_incentive_band']:.2f}",
             f"{self.report_on['pct_within_incentive_band']:.2f}"),
        ]
        w = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = [f"{a:<{w[0]}}  {b:>{w[1]}}  {c:>{w[2]}}" for a, b, c in rows]
        lines.append(f"relative reduction: {100 * self.reduction:.1f}%  (seed {self.seed})")
        return "\n".join(lines)


def compare_agc(case, scenario: Scenario, jobs: int = 1):
    """Paired AGC-off / AGC-on runs with one seed; returns (result, trace_off, trace_on)."""
    off = scenario.with_agc(False)
    on = scenario.with_agc(True)
    (tr_off, d_off), (tr_on, d_on) = run_many([(case, off), (case, on)], jobs)
    rep_off, rep_on = report_for(tr_off, off), report_for(tr_on, on)
    if d_off != d_on:
        raise RuntimeError("paired runs drew different noise paths")
    result = ComparisonResult(
        scenario=scenario.name, seed=scenario.seed,
        sigma_off=rep_off.sigma_f, sigma_on=rep_on.sigma_f,
        reduction=1.0 - rep_on.sigma_f / rep_off.sigma_f if rep_off.sigma_f > 0 else 0.0,
        noise_identical=d_off == d_on,
        report_off=rep_off.to_dict(), report_on=rep_on.to_dict(),
    )
    return result, tr_off, tr_on


def sweep_scenarios(scenario: Scenario, param: str, values) -> list[Scenario]:
    if param == "k_o":
        return [scenario.with_agc(True, k_o=float(v)) for v in values]
    if param == "t_sample":
        return [scenario.with_agc(True, t_sample_s=float(v)) for v in values]
    if param == "deadband":
        return [replace(scenario, apc_enabled=True, apc_deadband=float(v)) for v in values]
    raise ValueError(f"unknown sweep parameter {param!r}")


SWEEP_COLUMNS = ("value", "sigma_f_hz", "minutes_above", "minutes_below", "nadir_dev_hz",
                 "zenith_dev_hz", "pct_within_incentive_band", "all_pass")


def sweep(case, scenario: Scenario, param: str, values, jobs: int = 1) -> list[dict]:
    """One row per grid value; every run shares the scenario seed."""
    try:
        variants = sweep_scenarios(scenario, param, values)
        for v in variants:
            validate_scenario(v, case)
    except ScenarioError as exc:
        raise InputError(str(exc)) from None
    results = run_many([(case, v) for v in variants], jobs)
    digests = {d for _, d in results}
    if len(digests) > 1:
        raise RuntimeError("sweep runs drew different noise paths")
    rows = []
    for value, variant, (trace, _) in zip(values, variants, results):
        rep = report_for(trace, variant)
        rows.append({
            "value": float(value), "sigma_f_hz": rep.sigma_f,
            "minutes_above": rep.minutes_above_band, "minutes_below": rep.minutes_below_band,
            "nadir_dev_hz": rep.nadir_dev, "zenith_dev_hz": rep.zenith_dev,
            "pct_within_incentive_band": rep.pct_within_incentive_band,
            "all_pass": int(all(rep.passes.values())),
        })
    return rows


def write_sweep_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.12g}" if isinstance(v, float) else v) for k, v in r.items()})


def read_sweep_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "all_pass" else float(v)) for k, v in r.items()}
                for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# subcommands


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _figures(args) -> bool:
    return not args.no_figures


def cmd_run(args) -> int:
    case, sc = prepare(args.scenario, args.seed, args.dt, args.horizon)
    out = _out_dir(args)
    try:
        trace, _ = simulate(case, sc)
    except StepError as exc:
        if exc.trace is not None:
            partial = out / f"{sc.name}_partial_trace.csv"
            exc.trace.to_csv(partial)
            print(f"partial trace written to {partial}", file=sys.stderr)
        raise
    trace_path = out / sc.outputs.get("trace", f"{sc.name}_trace.csv")
    report_path = out / sc.outputs.get("report", f"{sc.name}_report.json")
    trace.to_csv(trace_path)
    rep = report_for(trace, sc, args.preset)
    rep.to_json(report_path)
    save_scenario(sc, out / f"{sc.name}_effective_scenario.json")
    if _figures(args):
        from freqquality.plotting import frequency_figure
        frequency_figure({sc.name: (trace.t, trace.f_coi_hz)}, out / f"{sc.name}_frequency.png",
                         band=get_preset(args.preset or sc.kpi_preset).standard_range, title=sc.name)
    print(rep.to_text())
    print(f"sigma_f = {rep.sigma_f:.5f} Hz")
    print(f"trace:  {trace_path}\nreport: {report_path}")
    return EXIT_OK


def cmd_compare(args) -> int:
    case, sc = prepare(args.scenario, args.seed, args.dt, args.horizon)
    out = _out_dir(args)
    result, tr_off, tr_on = compare_agc(case, sc, args.jobs)
    tr_off.to_csv(out / f"{sc.name}_agc_off_trace.csv")
    tr_on.to_csv(out / f"{sc.name}_agc_on_trace.csv")
    path = out / f"{sc.name}_compare.json"
    path.write_text(json.dumps(result.to_dict(), indent=2) + "\n", encoding="utf-8")
    if _figures(args):
        from freqquality.plotting import frequency_figure, histogram_figure
        series = {"AGC off": (tr_off.t, tr_off.f_coi_hz), "AGC on": (tr_on.t, tr_on.f_coi_hz)}
        frequency_figure(series, out / f"{sc.name}_compare.png", title=sc.name)
        histogram_figure({k: f for k, (_, f) in series.items()}, out / f"{sc.name}_compare_hist.png")
    print(result.table())
    print(f"result: {path}")
    return EXIT_OK


def _load_traces(paths) -> list[tuple[str, FrequencyTrace]]:
    traces = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise InputError(f"trace file not found: {p}")
        try:
            traces.append((p.stem, read_trace(p)))
        except (ValueError, StopIteration) as exc:
            raise InputError(f"{p}: {exc or 'empty file'}") from None
    return traces


def cmd_kpi(args) -> int:
    thresholds = get_preset(args.preset or "IE_NI").with_overrides(
        standard_range=args.standard_range, incentive_band=args.incentive_band,
        recovery_range=args.recovery_range, restoration_range=args.restoration_range)
    out = _out_dir(args)
    traces = _load_traces(args.traces)
    reports = {}
    for label, ft in traces:
        try:
            rep = kpi_report(ft, thresholds, args.event_t or [])
        except ValueError as exc:
            raise InputError(f"{label}: {exc}") from None
        rep.to_json(out / f"{label}_kpi.json")
        reports[label] = rep
        if len(traces) == 1:
            print(rep.to_text())
    if len(traces) > 1 or args.monthly:
        records = [month_record(label, ft, thresholds.incentive_band) for label, ft in traces]
        table = format_month_table(records)
        (out / "kpi_table.txt").write_text(table + "\n", encoding="utf-8")
        (out / "kpi_table.json").write_text(json.dumps(aggregate_months(records), indent=2) + "\n",
                                            encoding="utf-8")
        print(table)
    return EXIT_OK


def cmd_sweep(args) -> int:
    case, sc = prepare(args.scenario, args.seed, args.dt, args.horizon)
    out = _out_dir(args)
    rows = sweep(case, sc, args.param, args.values, args.jobs)
    path = out / f"{sc.name}_sweep_{args.param}.csv"
    write_sweep_csv(rows, path)
    if _figures(args):
        from freqquality.plotting import sweep_figure
        sweep_figure([r["value"] for r in rows], [r["sigma_f_hz"] for r in rows], args.param,
                     out / f"{sc.name}_sweep_{args.param}.png")
    for r in rows:
        print(f"{args.param}={r['value']:<8g} sigma_f={r['sigma_f_hz']:.5f} Hz  "
              f"within +/-{get_preset(sc.kpi_preset).incentive_band:g} Hz: "
              f"{r['pct_within_incentive_band']:.2f}%")
    print(f"sweep: {path}")
    return EXIT_OK


def cmd_validate(args) -> int:
    path = Path(args.file)
    if not path.exists() and path.parent == Path(".") and (DATA_DIR / path.name).exists():
        path = DATA_DIR / path.name
    if not path.exists():
        raise InputError(f"file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(raw, dict) and "buses" in raw:
        case = load_case(path)
        validate_case(case)
        print(f"{path}: valid case ({case.n_bus} buses, {len(case.machines)} machines, "
              f"{len(case.wind_plants)} wind plants)")
    else:
        case, sc = prepare(path, args.seed, args.dt, args.horizon)
        print(f"{path}: valid scenario '{sc.name}' ({sc.horizon:g} s at dt={sc.dt:g} s, "
              f"{len(sc.schedule.events)} scheduled events)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # flags accepted before or after the subcommand; the subcommand copy
    # must not reset values already given before it
    def d(value):
        return argparse.SUPPRESS if suppress else value

    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=d(None), help="override the scenario seed")
    p.add_argument("--dt", type=float, default=d(None), help="override the step size (s)")
    p.add_argument("--horizon", type=float, default=d(None), help="override the horizon (s)")
    p.add_argument("--out-dir", default=d("."), help="directory for output files")
    p.add_argument("--no-figures", action="store_true", default=d(False), help="skip PNG figures")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="freqquality", parents=[_global_flags(suppress=False)],
        description="Frequency-dynamics simulation with AGC and frequency-quality KPIs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _global_flags(suppress=True)

    p = sub.add_parser("run", parents=[common], help="simulate one scenario")
    p.add_argument("scenario", help="scenario JSON (path or bundled name)")
    p.add_argument("--preset", choices=("CE", "IE_NI"), default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", parents=[common], help="paired AGC-off / AGC-on runs")
    p.add_argument("scenario")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("kpi", parents=[common], help="KPI report for trace files")
    p.add_argument("traces", nargs="+", help="trace CSVs (simulator output or t,f_hz)")
    p.add_argument("--preset", choices=("CE", "IE_NI"), default="IE_NI")
    p.add_argument("--standard-range", type=float, default=None, help="Hz, overrides preset")
    p.add_argument("--incentive-band", type=float, default=None, help="Hz, overrides preset")
    p.add_argument("--recovery-range", type=float, default=None, help="Hz, overrides preset")
    p.add_argument("--restoration-range", type=float, default=None, help="Hz, overrides preset")
    p.add_argument("--event-t", type=float, action="append", help="event time (s), repeatable")
    p.add_argument("--monthly", action="store_true", help="month table even for one trace")
    p.set_defaults(func=cmd_kpi)

    p = sub.add_parser("sweep", parents=[common], help="sweep an AGC or APC parameter")
    p.add_argument("scenario")
    p.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    p.add_argument("--values", type=float, nargs="+", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate", parents=[common], help="check a case or scenario file")
    p.add_argument("file")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, CaseError, ScenarioError, FileNotFoundError, InitializationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (StepError, PowerFlowError, CoiError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
