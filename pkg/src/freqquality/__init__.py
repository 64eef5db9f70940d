"""Low-inertia power-system frequency simulation and frequency-quality KPIs."""

from freqquality.netmodel import PowerSystemCase, load_case, save_case, solve_power_flow
from freqquality.kpi import FrequencyTrace, KpiThresholds, kpi_report
from freqquality.solver import Simulation, SolverConfig, run

__all__ = [
    "PowerSystemCase",
    "load_case",
    "save_case",
    "solve_power_flow",
    "FrequencyTrace",
    "KpiThresholds",
    "kpi_report",
    "Simulation",
    "SolverConfig",
    "run",
]

__version__ = "0.1.0"
