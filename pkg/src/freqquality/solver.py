"""Assembly and time integration of the hybrid stochastic DAE.

Per step: the noise is advanced first (Euler-Maruyama), then the
differential and algebraic equations are integrated together with the
implicit trapezoidal rule and a Newton iteration that reuses its LU
factorization across steps until convergence slows. Discrete changes
(trips, battery switching, AGC dispatch) are applied at step boundaries,
after which the algebraic variables are re-solved.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import lu_factor

from freqquality import _kernel
from freqquality import agc as agcmod
from freqquality.devices import (
    CP_MAX,
    PITCH_MAX_DEG,
    TSR_OPT,
    BessFfr,
    apc_power_offset,
    apc_slope,
    aero_power,
    deadband_slope,
    dfig_equilibrium,
    dfig_rhs,
    governor_derivatives,
    machine_equilibrium,
    two_axis,
    two_axis_partials,
)
from freqquality.kpi import FrequencyTrace
from freqquality.netmodel import PowerSystemCase, build_ybus, dS_dV, solve_power_flow
from freqquality.scenario import Scenario
from freqquality.stochastic import OuBank, stationary_sigma_to_diffusion

log = logging.getLogger(__name__)


class InitializationError(RuntimeError):
    pass


class StepError(RuntimeError):
    def __init__(self, t: float, residual: float, trace=None):
        self.t = t
        self.residual = residual
        self.trace = trace
        super().__init__(f"Newton iteration failed at t={t:.4f} s (residual {residual:.3e})")


class CoiError(RuntimeError):
    pass


@dataclass
class SolverConfig:
    dt: float = 0.01
    horizon: float = 300.0
    newton_tol: float = 1e-8
    newton_max_iter: int = 20
    check_algebraic: bool = False
    record_diagnostics: bool = False

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.horizon < self.dt:
            raise ValueError("horizon must be >= dt")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass
class Inputs:
    """Set-points and exogenous signals seen by the equations (u and part of z)."""

    p_load: np.ndarray
    q_load: np.ndarray
    p_inject: np.ndarray  # battery injections per bus
    wind_speed: np.ndarray
    p_ref: np.ndarray
    v_ref: np.ndarray
    v_ref_w: np.ndarray
    dp_agc: np.ndarray
    in_service: np.ndarray


class SystemModel:
    """f(x, y, u) and g(x, y, u) for a case, vectorized per device type.

    State layout (block per quantity): machines ``delta, omega, e'q, e'd,
    v_r, x_g, p_m``, then wind plants ``omega_r, i_rd, i_rq, beta, f_m``.
    Algebraic layout: bus angles then bus voltage magnitudes.
    """

    MACHINE_STATES = ("delta", "omega", "eq", "ed", "vr", "xg", "pm")
    WIND_STATES = ("wr", "ird", "irq", "beta", "fm")

    def __init__(self, case: PowerSystemCase, apc_enabled: bool = False, apc_deadband: float = 0.2):
        self.case = case
        self.f_nom = case.f_nom
        self.omega_b = 2 * np.pi * case.f_nom
        self.apc_enabled = apc_enabled
        self.apc_deadband = apc_deadband
        idx = case.bus_index()
        self.nb = nb = case.n_bus
        self.nm = nm = len(case.machines)
        self.nw = nw = len(case.wind_plants)
        self.Y = build_ybus(case)
        sb = case.base_mva

        ms = case.machines
        self.m_bus = np.array([idx[m.bus] for m in ms], dtype=int)
        k = np.array([m.rating_mva / sb for m in ms])  # machine -> system scale
        self.m_scale = k
        self.M = np.array([2 * m.H for m in ms]) * k
        self.D = np.array([m.D for m in ms]) * k
        self.xd = np.array([m.x_d for m in ms]) / k
        self.xq = np.array([m.x_q for m in ms]) / k
        self.xd1 = np.array([m.x_d_prime for m in ms]) / k
        self.xq1 = np.array([m.x_q_prime for m in ms]) / k
        self.Td0 = np.array([m.T_d0_prime for m in ms])
        self.Tq0 = np.array([m.T_q0_prime for m in ms])
        self.Ka = np.array([m.exciter.K_a for m in ms])
        self.Ta = np.array([m.exciter.T_a for m in ms])
        self.efd_min = np.array([m.exciter.efd_min for m in ms])
        self.efd_max = np.array([m.exciter.efd_max for m in ms])
        self.droop = np.array([m.governor.R for m in ms])
        self.gov_gain = k / self.droop
        self.db_pu = np.array([m.governor.deadband_hz for m in ms]) / case.f_nom
        self.Tg = np.array([m.governor.T_g for m in ms])
        self.Tt = np.array([m.governor.T_t for m in ms])
        self.p_min = np.array([m.governor.p_min for m in ms]) * k
        self.p_max = np.array([m.governor.p_max for m in ms]) * k

        ws = case.wind_plants
        self.w_bus = np.array([idx[w.bus] for w in ws], dtype=int)
        self.w_scale = np.array([w.rating_mva / sb for w in ws])
        for name in ("H_w", "v_rated", "T_i", "T_v", "K_v", "K_pitch", "T_pitch", "T_f",
                     "R_apc", "apc_headroom", "apc_floor"):
            setattr(self, "w_" + name, np.array([getattr(w, name) for w in ws], dtype=float))

        gen_buses = list(self.m_bus) + list(self.w_bus)
        if len(set(gen_buses)) != len(gen_buses):
            raise InitializationError("more than one generating device on a bus")

        self.nx = 7 * nm + 5 * nw
        self.ny = 2 * nb
        self.n = self.nx + self.ny
        self.ix = {name: np.arange(nm) + j * nm for j, name in enumerate(self.MACHINE_STATES)}
        for j, name in enumerate(self.WIND_STATES):
            self.ix[name] = 7 * nm + j * nw + np.arange(nw)

        # packed blocks for the compiled kernel; row order follows _kernel
        self._mpar = np.ascontiguousarray(np.vstack([
            self.M, self.D, self.xd, self.xq, self.xd1, self.xq1, self.Td0, self.Tq0,
            self.Ka, self.Ta, self.efd_min, self.efd_max, self.gov_gain, self.db_pu,
            self.Tg, self.Tt, self.p_min, self.p_max]).reshape(_kernel.N_MPAR, nm))
        self._wpar = np.ascontiguousarray(np.vstack([
            self.w_H_w, self.w_v_rated, self.w_T_i, self.w_T_v, self.w_K_v, self.w_K_pitch,
            self.w_T_pitch, self.w_T_f, self.w_R_apc, self.w_apc_headroom, self.w_apc_floor,
            self.w_scale]).reshape(_kernel.N_WPAR, nw))
        self._G = np.ascontiguousarray(self.Y.real)
        self._B = np.ascontiguousarray(self.Y.imag)
        self._scal = np.array([self.omega_b, self.f_nom, float(apc_enabled), apc_deadband,
                               TSR_OPT, CP_MAX, PITCH_MAX_DEG])

    def pack(self, u: Inputs):
        """Kernel argument tuple (everything after x, y) for inputs ``u``."""
        um = np.vstack([u.p_ref, u.v_ref, u.dp_agc, u.in_service]).reshape(4, self.nm)
        uw = np.vstack([u.wind_speed, u.v_ref_w]).reshape(2, self.nw)
        ub = np.vstack([u.p_load, u.q_load, u.p_inject])
        return (self.m_bus, self.w_bus, self._mpar, self._wpar, self._G, self._B,
                np.ascontiguousarray(um, dtype=float), np.ascontiguousarray(uw, dtype=float),
                np.ascontiguousarray(ub, dtype=float), self._scal)

    # -- helpers ---------------------------------------------------------
    def split_x(self, x):
        nm, nw = self.nm, self.nw
        m = x[: 7 * nm].reshape(7, nm)
        w = x[7 * nm:].reshape(5, nw)
        return m, w

    def coi(self, x, in_service):
        omega = x[self.ix["omega"]]
        w = self.M * in_service
        total = w.sum()
        if total <= 0:
            raise CoiError("no in-service synchronous machines")
        return float(w @ omega / total)

    # -- residuals -------------------------------------------------------
    def evaluate(self, x, y, u: Inputs, packed=None):
        """Return (f, g, omega_coi) at (x, y) under inputs ``u`` (compiled path)."""
        f = np.empty(self.nx)
        g = np.empty(self.ny)
        packed = packed if packed is not None else self.pack(u)
        omega_coi = _kernel.residual(np.asarray(x, dtype=float), np.asarray(y, dtype=float),
                                     *packed, f, g)
        return f, g, omega_coi

    def evaluate_reference(self, x, y, u: Inputs):
        """Same residual assembled from the device functions; returns (f, g, aux)."""
        nb = self.nb
        va, vm = y[:nb], y[nb:]
        (delta, omega, eq, ed, vr, xg, pm), (wr, ird, irq, beta, fm) = self.split_x(x)
        s = u.in_service
        vmm, vam = vm[self.m_bus], va[self.m_bus]
        efd = np.minimum(np.maximum(vr, self.efd_min), self.efd_max)
        d_delta, d_omega, d_eq, d_ed, pe, qe, _, _ = two_axis(
            delta, omega, eq, ed, vmm, vam, pm, efd, M=self.M, D=self.D, xd=self.xd,
            xq=self.xq, xd1=self.xd1, xq1=self.xq1, Td0=self.Td0, Tq0=self.Tq0,
            omega_b=self.omega_b)
        d_vr = (self.Ka * (u.v_ref - vmm) - vr) / self.Ta
        d_xg, d_pm = governor_derivatives(
            xg, pm, omega, u.dp_agc, p_ref=u.p_ref, gain=self.gov_gain, db_pu=self.db_pu,
            T_g=self.Tg, T_t=self.Tt, p_min=self.p_min, p_max=self.p_max)
        f = np.empty(self.nx)
        fm_ = f[: 7 * self.nm].reshape(7, self.nm)
        for j, d in enumerate((d_delta, d_omega, d_eq, d_ed, d_vr, d_xg, d_pm)):
            fm_[j] = d
        fm_ *= s

        wsum = self.M @ s
        omega_coi = (self.M * s) @ omega / wsum
        if self.nw:
            vmw = vm[self.w_bus]
            d_wr, d_ird, d_irq, d_beta, d_fm, _ = dfig_rhs(
                wr, ird, irq, beta, fm, vmw, u.wind_speed, omega_coi,
                H_w=self.w_H_w, v_rated=self.w_v_rated, T_i=self.w_T_i, T_v=self.w_T_v,
                K_v=self.w_K_v, v_ref=u.v_ref_w, K_pitch=self.w_K_pitch, T_pitch=self.w_T_pitch,
                T_f=self.w_T_f, apc_on=self.apc_enabled, apc_db=self.apc_deadband,
                R_apc=self.w_R_apc, headroom=self.w_apc_headroom, floor=self.w_apc_floor,
                f_nom=self.f_nom)
            f[7 * self.nm:] = np.concatenate([d_wr, d_ird, d_irq, d_beta, d_fm])
            pw = self.w_scale * vmw * irq
            qw = self.w_scale * vmw * ird
        else:
            pw = qw = np.zeros(0)

        V = vm * np.exp(1j * va)
        S = V * np.conj(self.Y @ V)
        p_inj = (np.bincount(self.m_bus, pe * s, nb) + np.bincount(self.w_bus, pw, nb)
                 + u.p_inject - u.p_load)
        q_inj = np.bincount(self.m_bus, qe * s, nb) + np.bincount(self.w_bus, qw, nb) - u.q_load
        g = np.concatenate([p_inj - S.real, q_inj - S.imag])
        return f, g, (pe * s, omega_coi, pw)

    def jacobian(self, x, y, u: Inputs):
        """Dense (Fx, Fy, Gx, Gy) of the assembled system."""
        nb, nm, nw = self.nb, self.nm, self.nw
        ix = self.ix
        va, vm = y[:nb], y[nb:]
        (delta, omega, eq, ed, vr, xg, pm), (wr, ird, irq, beta, fm) = self.split_x(x)
        s = u.in_service.astype(float)
        mb, wb = self.m_bus, self.w_bus
        Fx = np.zeros((self.nx, self.nx))
        Fy = np.zeros((self.nx, self.ny))
        Gx = np.zeros((self.ny, self.nx))
        Gy = np.zeros((self.ny, self.ny))

        did, diq, dpe, dqe = two_axis_partials(delta, eq, ed, vm[mb], va[mb], self.xd1, self.xq1)
        cols_x = [ix["delta"], ix["eq"], ix["ed"]]
        cols_y = [mb, nb + mb]

        def put(rows, mat_x, mat_y, partial, scale):
            for j, c in enumerate(cols_x):
                mat_x[rows, c] += partial[j] * scale
            for j, c in enumerate(cols_y):
                mat_y[rows, c] += partial[3 + j] * scale

        Fx[ix["delta"], ix["omega"]] = self.omega_b * s
        put(ix["omega"], Fx, Fy, dpe, -s / self.M)
        Fx[ix["omega"], ix["omega"]] += -self.D / self.M * s
        Fx[ix["omega"], ix["pm"]] += s / self.M
        put(ix["eq"], Fx, Fy, did, -(self.xd - self.xd1) / self.Td0 * s)
        Fx[ix["eq"], ix["eq"]] += -s / self.Td0
        sat_vr = ((vr > self.efd_min) & (vr < self.efd_max)).astype(float)
        Fx[ix["eq"], ix["vr"]] += sat_vr / self.Td0 * s
        put(ix["ed"], Fx, Fy, diq, (self.xq - self.xq1) / self.Tq0 * s)
        Fx[ix["ed"], ix["ed"]] += -s / self.Tq0
        Fx[ix["vr"], ix["vr"]] = -s / self.Ta
        Fy[ix["vr"], nb + mb] = -self.Ka / self.Ta * s
        Fx[ix["xg"], ix["omega"]] = -self.gov_gain * deadband_slope(omega - 1.0, self.db_pu) / self.Tg * s
        Fx[ix["xg"], ix["xg"]] = -s / self.Tg
        sat_xg = ((xg > self.p_min) & (xg < self.p_max)).astype(float)
        Fx[ix["pm"], ix["xg"]] = sat_xg / self.Tt * s
        Fx[ix["pm"], ix["pm"]] = -s / self.Tt
        put(mb, Gx, Gy, dpe, s)
        put(nb + mb, Gx, Gy, dqe, s)

        if nw:
            vmw = vm[wb]
            pa, dpa_dw, dpa_db = aero_power(wr, beta, u.wind_speed, self.w_v_rated)
            den = 2.0 * self.w_H_w * wr
            Fx[ix["wr"], ix["wr"]] = dpa_dw / den - (pa - vmw * irq) / (den * wr)
            Fx[ix["wr"], ix["beta"]] = dpa_db / den
            Fx[ix["wr"], ix["irq"]] = -vmw / den
            Fy[ix["wr"], nb + wb] = -irq / den
            Fx[ix["ird"], ix["ird"]] = -1.0 / self.w_T_v
            Fy[ix["ird"], nb + wb] = -self.w_K_v / self.w_T_v
            mppt = np.clip(wr, 0.0, 1.0) ** 3
            dmppt = np.where((wr > 0) & (wr < 1), 3 * wr**2, 0.0)
            pref = mppt
            dapc = np.zeros(nw)
            if self.apc_enabled:
                pref = pref + apc_power_offset(fm * self.f_nom, self.apc_deadband, self.w_R_apc,
                                               self.w_apc_headroom, self.w_apc_floor, self.f_nom)
                dapc = apc_slope(fm * self.f_nom, self.apc_deadband, self.w_R_apc,
                                 self.w_apc_headroom, self.w_apc_floor, self.f_nom)
            unclipped = ((pref > 0) & (pref < 1)).astype(float)
            pref = np.clip(pref, 0.0, 1.0)
            Fx[ix["irq"], ix["wr"]] = dmppt * unclipped / (vmw * self.w_T_i)
            Fx[ix["irq"], ix["fm"]] = dapc * unclipped / (vmw * self.w_T_i)
            Fx[ix["irq"], ix["irq"]] = -1.0 / self.w_T_i
            Fy[ix["irq"], nb + wb] = -pref / (vmw**2 * self.w_T_i)
            kp = self.w_K_pitch * (wr - 1.0)
            Fx[ix["beta"], ix["wr"]] = np.where((kp > 0) & (kp < 30.0), self.w_K_pitch, 0.0) / self.w_T_pitch
            Fx[ix["beta"], ix["beta"]] = -1.0 / self.w_T_pitch
            wcoi = self.M * s / (self.M @ s)
            Fx[np.ix_(ix["fm"], ix["omega"])] = wcoi[None, :] / self.w_T_f[:, None]
            Fx[ix["fm"], ix["fm"]] = -1.0 / self.w_T_f
            Gx[wb, ix["irq"]] = self.w_scale * vmw
            Gy[wb, nb + wb] += self.w_scale * irq
            Gx[nb + wb, ix["ird"]] = self.w_scale * vmw
            Gy[nb + wb, nb + wb] += self.w_scale * ird

        dva, dvm = dS_dV(self.Y, vm, va)
        Gy[:nb, :nb] -= dva.real
        Gy[:nb, nb:] -= dvm.real
        Gy[nb:, :nb] -= dva.imag
        Gy[nb:, nb:] -= dvm.imag
        return Fx, Fy, Gx, Gy

    def numerical_jacobian(self, x, y, u: Inputs, eps: float = 1e-7):
        """Central-difference Jacobian of [f; g] w.r.t. [x; y] (test fallback)."""
        z = np.concatenate([x, y])
        J = np.zeros((self.n, self.n))
        for j in range(self.n):
            zp, zm = z.copy(), z.copy()
            zp[j] += eps
            zm[j] -= eps
            fp, gp, _ = self.evaluate(zp[: self.nx], zp[self.nx:], u)
            fm_, gm, _ = self.evaluate(zm[: self.nx], zm[self.nx:], u)
            J[:, j] = (np.concatenate([fp, gp]) - np.concatenate([fm_, gm])) / (2 * eps)
        return J


@dataclass
class SystemState:
    """The (x, y, eta, z, u) partition at one instant."""

    t: float
    x: np.ndarray
    y: np.ndarray
    eta: np.ndarray
    z: dict
    u: Inputs


@dataclass
class SimulationTrace:
    """Uniformly sampled output channels; one row per step."""

    columns: list[str]
    data: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self.columns.index(name)]

    @property
    def t(self) -> np.ndarray:
        return self.column("t")

    @property
    def f_coi_hz(self) -> np.ndarray:
        return self.column("f_coi_hz")

    def frequency_trace(self) -> FrequencyTrace:
        t = self.t
        dt = float(t[1] - t[0]) if t.size > 1 else 1.0
        return FrequencyTrace(t=t, f=self.f_coi_hz, dt=dt)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for row in self.data:
                w.writerow([f"{v:.12g}" for v in row])

    @classmethod
    def from_csv(cls, path: str | Path) -> "SimulationTrace":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        return cls(columns=rows[0], data=np.array(rows[1:], dtype=float).reshape(len(rows) - 1, len(rows[0])))


def trace_columns(case: PowerSystemCase) -> list[str]:
    return (["t", "f_coi_hz", "delta_p_agc_pu"]
            + [f"f_m{m.id}_hz" for m in case.machines]
            + [f"p_bess{b.id}_pu" for b in case.bess_units])


class Simulation:
    """One simulation run; owns its state exclusively."""

    def __init__(self, case: PowerSystemCase, scenario: Scenario | None = None,
                 config: SolverConfig | None = None):
        scenario = scenario or Scenario(horizon=(config.horizon if config else 300.0))
        self.case = case
        self.scenario = scenario
        self.config = config or SolverConfig(dt=scenario.dt, horizon=scenario.horizon)
        self.model = SystemModel(case, scenario.apc_enabled, scenario.apc_deadband)
        self.schedule = scenario.schedule
        self._pending_trips = sorted(self.schedule.trips(), key=lambda e: e.t_start)
        self._machine_pos = {m.id: i for i, m in enumerate(case.machines)}
        self._lu = None
        self._no_lu = np.zeros((1, 1))
        self._no_piv = np.zeros(1, dtype=np.int32)
        self.stats = {"factorizations": 0, "newton_iterations": 0, "steps": 0}
        self._noise_hash = hashlib.blake2b(digest_size=16)
        self._initialize()

    # -- initialization ------------------------------------------------------
    def _initialize(self):
        case, model = self.case, self.model
        pf = solve_power_flow(case)
        sb = case.base_mva
        pg, qg = pf.generation()
        nm, nw, nb = model.nm, model.nw, model.nb
        x = np.zeros(model.nx)
        p_ref = np.zeros(nm)
        v_ref = np.zeros(nm)
        for i, m in enumerate(case.machines):
            k = model.m_bus[i]
            scale = m.rating_mva / sb
            delta, eq, ed, efd = machine_equilibrium(m, pf.vm[k], pf.va[k], pg[k] / scale, qg[k] / scale)
            if not (model.p_min[i] - 1e-9 <= pg[k] <= model.p_max[i] + 1e-9):
                raise InitializationError(
                    f"machine {m.id}: scheduled {pg[k]:.4f} pu outside governor limits "
                    f"[{model.p_min[i]:.4f}, {model.p_max[i]:.4f}]")
            if not (m.exciter.efd_min <= efd <= m.exciter.efd_max):
                raise InitializationError(f"machine {m.id}: field voltage {efd:.3f} outside exciter limits")
            for name, value in (("delta", delta), ("omega", 1.0), ("eq", eq), ("ed", ed),
                                ("vr", efd), ("xg", pg[k]), ("pm", pg[k])):
                x[model.ix[name][i]] = value
            p_ref[i] = pg[k]
            v_ref[i] = pf.vm[k] + efd / m.exciter.K_a
        v_mean = np.zeros(nw)
        v_ref_w = np.zeros(nw)
        for i, w in enumerate(case.wind_plants):
            k = model.w_bus[i]
            scale = w.rating_mva / sb
            try:
                st, v_mean[i], v_ref_w[i] = dfig_equilibrium(w, pf.vm[k], pg[k] / scale, qg[k] / scale)
            except ValueError as exc:
                raise InitializationError(str(exc)) from None
            for name, value in zip(model.WIND_STATES, st):
                x[model.ix[name][i]] = value
        self.v_mean = v_mean
        y = np.concatenate([pf.va, pf.vm])

        self.load_bus = np.array([model.case.bus_index()[ld.bus] for ld in case.loads], dtype=int)
        self.load_p0 = np.array([ld.p for ld in case.loads])
        self.load_q0 = np.array([ld.q for ld in case.loads])
        self.load_keys = [f"load:{ld.bus}" for ld in case.loads]
        self.wind_keys = [f"wind:{w.id}" for w in case.wind_plants]
        self._sched_loads = [i for i, key in enumerate(self.load_keys) if key in self.schedule.targets()]
        self._sched_wind = [i for i, key in enumerate(self.wind_keys) if key in self.schedule.targets()]

        u = Inputs(
            p_load=np.bincount(self.load_bus, self.load_p0, nb),
            q_load=np.bincount(self.load_bus, self.load_q0, nb),
            p_inject=np.zeros(nb), wind_speed=v_mean.copy(), p_ref=p_ref, v_ref=v_ref,
            v_ref_w=v_ref_w, dp_agc=np.zeros(nm), in_service=np.ones(nm),
        )
        self.bess = [BessFfr(b) for b in case.bess_units]
        self.bess_bus = np.array([case.bus_index()[b.bus] for b in case.bess_units], dtype=int)
        self.bess_p = np.zeros(len(self.bess))

        sc = self.scenario
        noise = sc.noise
        alpha, sigma, keys = [], [], []
        if noise.enabled:
            for key in self.load_keys + self.wind_keys:
                is_load = key.startswith("load:")
                a = noise.load_alpha if is_load else noise.wind_alpha
                std = noise.load_std if is_load else noise.wind_std
                ov = noise.overrides.get(key, {})
                a, std = ov.get("alpha", a), ov.get("std", std)
                alpha.append(a)
                sigma.append(stationary_sigma_to_diffusion(std, a))
                keys.append(key)
        self.noise_keys = keys
        self.bank = OuBank(alpha, np.zeros(len(alpha)), sigma, seed=sc.seed, keys=keys)
        self._noise_load = np.array([self.load_keys.index(k) for k in keys if k.startswith("load:")], dtype=int)
        self._noise_wind = np.array([self.wind_keys.index(k) for k in keys if k.startswith("wind:")], dtype=int)
        self._n_noise_load = len(self._noise_load)

        cfg = sc.agc
        self.agc = agcmod.AgcController(
            k_o=cfg.k_o, t_sample=cfg.t_sample_s, dp_min=cfg.dp_min, dp_max=cfg.dp_max,
            enabled=cfg.enabled, share_rule=cfg.share_rule, shares=np.zeros(nm))
        participants = None
        if cfg.participants:
            participants = [self._machine_pos[i] for i in cfg.participants]
        self.registry = agcmod.DroopRegistry.build(model.droop, model.m_scale, participants)

        f, g, _ = model.evaluate(x, y, u)
        res_f = float(np.max(np.abs(f), initial=0.0))
        res_g = float(np.max(np.abs(g), initial=0.0))
        if res_f > 1e-8 or res_g > 1e-8:
            raise InitializationError(f"initial residual too large (|f|={res_f:.2e}, |g|={res_g:.2e})")
        self.state = SystemState(
            t=0.0, x=x, y=y, eta=self.bank.eta.copy(),
            z={"in_service": u.in_service, "bess_active": np.zeros(len(self.bess), dtype=bool),
               "step": 0},
            u=u,
        )
        self._f = f
        self._y_prev = None
        self.init_residual = (res_f, res_g)

    # -- per-step pieces -------------------------------------------------------
    def noise_digest(self) -> str:
        """Hash of every noise sample drawn so far; equal digests mean equal paths."""
        return self._noise_hash.hexdigest()

    def omega_coi(self) -> float:
        return self.model.coi(self.state.x, self.state.u.in_service)

    def _update_inputs(self, t: float, eta: np.ndarray):
        u = self.state.u
        nb = self.model.nb
        p = self.load_p0.copy()
        q = self.load_q0.copy()
        if self._n_noise_load:
            scale = 1.0 + eta[: self._n_noise_load]
            p[self._noise_load] *= scale
            q[self._noise_load] *= scale
        for i in self._sched_loads:
            p[i] += self.schedule.value(self.load_keys[i], t)
        p = np.maximum(p, 0.0)
        u.p_load = np.bincount(self.load_bus, p, nb)
        u.q_load = np.bincount(self.load_bus, q, nb)
        ws = self.v_mean.copy()
        if self._noise_wind.size:
            ws[self._noise_wind] += eta[self._n_noise_load:]
        for i in self._sched_wind:
            ws[i] += self.schedule.value(self.wind_keys[i], t)
        u.wind_speed = np.maximum(ws, 0.0)

    def _factorize(self, x, y, h):
        Fx, Fy, Gx, Gy = self.model.jacobian(x, y, self.state.u)
        nx = self.model.nx
        A = np.empty((self.model.n, self.model.n))
        A[:nx, :nx] = np.eye(nx) - h * Fx
        A[:nx, nx:] = -h * Fy
        A[nx:, :nx] = Gx
        A[nx:, nx:] = Gy
        self._lu = lu_factor(A, check_finite=False)
        self.stats["factorizations"] += 1

    def _newton(self, x0, y0, f0, h):
        cfg = self.config
        packed = self.model.pack(self.state.u)
        # explicit Euler predictor for x; y extrapolated from the last step
        x = x0 + 2.0 * h * f0
        y = y0 + (y0 - self._y_prev) if self._y_prev is not None else y0.copy()
        f = np.empty_like(x0)
        g = np.empty_like(y0)
        it, prev, refreshed = 0, np.inf, False
        while True:
            has_lu = self._lu is not None
            lu, piv = self._lu if has_lu else (self._no_lu, self._no_piv)
            status, it, prev, err = _kernel.chord_newton(
                x, y, x0, f0, h, lu, piv, has_lu, not refreshed, it, prev,
                cfg.newton_tol, cfg.newton_max_iter, *packed, f, g)
            if status == 0:
                self.stats["newton_iterations"] += it
                return x, y, f, err
            if status == 2:
                raise StepError(self.state.t + cfg.dt, err)
            self._factorize(x, y, h)
            refreshed = True

    def _resolve_algebraic(self):
        """Solve g(x, y) = 0 for y with x held; used after discrete changes."""
        model, st = self.model, self.state
        y = st.y.copy()
        packed = model.pack(st.u)
        for _ in range(self.config.newton_max_iter):
            f, g, omega_coi = model.evaluate(st.x, y, st.u, packed)
            err = float(np.max(np.abs(g)))
            if err < self.config.newton_tol:
                break
            Gy = model.jacobian(st.x, y, st.u)[3]
            y += np.linalg.solve(Gy, -g)
        else:
            raise StepError(st.t, err)
        st.y = y
        self._y_prev = None
        self._f = f
        self._lu = None
        return omega_coi

    def apply_trip(self, machine_id: int):
        i = self._machine_pos[machine_id]
        u = self.state.u
        u.in_service = u.in_service.copy()
        u.in_service[i] = 0.0
        u.dp_agc = u.dp_agc.copy()
        self.registry.trip(i)
        if self.agc.enabled:
            u.dp_agc[:] = agcmod.redistribute(self.agc, self.registry)
        u.dp_agc[i] = 0.0
        self.state.z["in_service"] = u.in_service
        log.debug("machine %s tripped at t=%.3f", machine_id, self.state.t)

    def step(self) -> SystemState:
        st, cfg, model = self.state, self.config, self.model
        n = st.z["step"] + 1
        t = n * cfg.dt
        h = 0.5 * cfg.dt
        eta = self.bank.step(cfg.dt)
        self._noise_hash.update(eta.tobytes())
        self._update_inputs(t, eta)
        try:
            x, y, f, err = self._newton(st.x, st.y, self._f, h)
        except StepError as exc:
            exc.t = t
            raise
        self._y_prev = st.y
        st.x, st.y, st.t, st.eta = x, y, t, eta
        st.z["step"] = n
        self._f = f
        self.stats["steps"] += 1

        omega = model.coi(x, st.u.in_service)
        changed = False
        if self.agc.enabled:
            agcmod.agc_integrate(self.agc, omega, cfg.dt)
        f_hz = omega * model.f_nom
        for i, b in enumerate(self.bess):
            p = b.power(f_hz, t)
            if p != self.bess_p[i]:
                self.bess_p[i] = p
                changed = True
        if changed:
            st.u.p_inject = np.bincount(self.bess_bus, self.bess_p, model.nb)
            st.z["bess_active"] = np.array([b.active for b in self.bess], dtype=bool)
        while self._pending_trips and self._pending_trips[0].t_start <= t + 1e-9:
            ev = self._pending_trips.pop(0)
            self.apply_trip(int(ev.target.split(":")[1]))
            changed = True
        if self.agc.enabled and agcmod.is_sampling_step(n, self.agc.t_sample, cfg.dt):
            old = st.u.dp_agc
            new = agcmod.agc_sample(self.agc, self.registry, t)
            if not np.array_equal(old, new):
                st.u.dp_agc = new.copy()
                changed = True
        if changed:
            self._resolve_algebraic()
        if cfg.check_algebraic:
            _, g, _ = model.evaluate(st.x, st.y, st.u)
            gmax = float(np.max(np.abs(g)))
            if gmax >= cfg.newton_tol:
                raise StepError(t, gmax)
        return st

    def _row(self) -> np.ndarray:
        st = self.state
        omega = st.x[self.model.ix["omega"]]
        dp = self.agc.held if self.agc.enabled else 0.0
        return np.concatenate([[st.t, self.omega_coi() * self.model.f_nom, dp],
                               omega * self.model.f_nom, self.bess_p])

    def run(self) -> SimulationTrace:
        cfg = self.config
        n_steps = cfg.n_steps
        cols = trace_columns(self.case)
        data = np.empty((n_steps + 1, len(cols)))
        data[0] = self._row()
        diag = None
        if cfg.record_diagnostics:
            diag = {"dp": np.zeros(n_steps + 1), "shares": np.zeros((n_steps + 1, self.model.nm)),
                    "p_m": np.zeros((n_steps + 1, self.model.nm)), "eta": np.zeros((n_steps + 1, self.bank.eta.size)),
                    "p_wind": np.zeros((n_steps + 1, self.model.nw)),
                    "omega_r": np.zeros((n_steps + 1, self.model.nw)),
                    "beta": np.zeros((n_steps + 1, self.model.nw)),
                    "in_service": np.zeros((n_steps + 1, self.model.nm))}
            self._record_diag(diag, 0)
        for k in range(1, n_steps + 1):
            try:
                self.step()
            except StepError as exc:
                exc.trace = SimulationTrace(cols, data[:k].copy(), diag or {})
                raise
            data[k] = self._row()
            if diag is not None:
                self._record_diag(diag, k)
        return SimulationTrace(cols, data, diag or {})

    def _record_diag(self, diag, k):
        st, ix = self.state, self.model.ix
        diag["dp"][k] = self.agc.dp
        diag["shares"][k] = st.u.dp_agc
        diag["p_m"][k] = st.x[ix["pm"]]
        diag["eta"][k] = st.eta
        diag["in_service"][k] = st.u.in_service
        if self.model.nw:
            vm = st.y[self.model.nb:][self.model.w_bus]
            diag["p_wind"][k] = vm * st.x[ix["irq"]]
            diag["omega_r"][k] = st.x[ix["wr"]]
            diag["beta"][k] = st.x[ix["beta"]]


def integrate_dae(f, g, jac, x0, y0, dt: float, n_steps: int, tol: float = 1e-10,
                  max_iter: int = 20):
    """Plain trapezoidal integration of x' = f(x, y), 0 = g(x, y) with full Newton.

    A reference for the compiled stepper (same discretization, no Jacobian
    reuse, no events). ``jac(x, y)`` returns ``(Fx, Fy, Gx, Gy)``. Returns
    arrays of x and y at every step, the initial point included.
    """
    x = np.array(x0, dtype=float)
    y = np.array(y0, dtype=float)
    nx = x.size
    xs, ys = [x.copy()], [y.copy()]
    h = 0.5 * dt
    f0 = f(x, y)
    for n in range(n_steps):
        xn, yn = x.copy(), y.copy()
        for _ in range(max_iter):
            fn = f(xn, yn)
            r = np.concatenate([xn - x - h * (fn + f0), g(xn, yn)])
            if np.max(np.abs(r), initial=0.0) < tol:
                break
            Fx, Fy, Gx, Gy = jac(xn, yn)
            A = np.block([[np.eye(nx) - h * Fx, -h * Fy], [Gx, Gy]])
            dz = np.linalg.solve(A, -r)
            xn += dz[:nx]
            yn += dz[nx:]
        else:
            raise StepError((n + 1) * dt, float(np.max(np.abs(r))))
        x, y, f0 = xn, yn, fn
        xs.append(x.copy())
        ys.append(y.copy())
    return np.array(xs), np.array(ys)


def coi_frequency(state: SystemState, model: SystemModel) -> float:
    """Inertia-weighted (H*S) mean rotor speed over in-service machines."""
    return model.coi(state.x, state.u.in_service)


def run(case: PowerSystemCase, scenario: Scenario, config: SolverConfig | None = None) -> SimulationTrace:
    return Simulation(case, scenario, config).run()
