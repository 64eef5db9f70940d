"""Dynamic device models.

The kernels here are written over numpy arrays so the same code serves the
single-device functions used in tests and the vectorized device banks the
solver assembles. Sign convention: injections into the network are positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from freqquality.netmodel import BessUnit, Machine, TurbineGovernor

APC_DEADBANDS = (0.2, 0.015)
PITCH_MAX_DEG = 30.0


def _clip(x, lo, hi):
    # np.clip carries noticeable dispatch overhead on the small arrays used here
    return np.minimum(np.maximum(x, lo), hi)


def deadband(x, width):
    """Offset deadband: zero inside +/-width, shifted linear outside."""
    return x - _clip(x, -width, width)


def deadband_slope(x, width):
    return (np.abs(x) > width).astype(float)


# ---------------------------------------------------------------------------
# synchronous machine, two-axis (4th order)


def two_axis(delta, omega, eq, ed, vm, va, pm, efd, *, M, D, xd, xq, xd1, xq1, Td0, Tq0, omega_b):
    """Right-hand side of the two-axis machine plus its stator quantities.

    Returns ``(d_delta, d_omega, d_eq, d_ed, pe, qe, i_d, i_q)``. Stator
    resistance is neglected, so the stator equations are solved in closed
    form for the d/q currents.
    """
    a = delta - va
    vd = vm * np.sin(a)
    vq = vm * np.cos(a)
    i_d = (eq - vq) / xd1
    i_q = (vd - ed) / xq1
    pe = vd * i_d + vq * i_q
    qe = vq * i_d - vd * i_q
    d_delta = omega_b * (omega - 1.0)
    d_omega = (pm - pe - D * (omega - 1.0)) / M
    d_eq = (-eq - (xd - xd1) * i_d + efd) / Td0
    d_ed = (-ed + (xq - xq1) * i_q) / Tq0
    return d_delta, d_omega, d_eq, d_ed, pe, qe, i_d, i_q


def two_axis_partials(delta, eq, ed, vm, va, xd1, xq1):
    """Partials of (i_d, i_q, pe, qe) w.r.t. (delta, eq, ed, va, vm).

    Each returned array has shape ``(5, n)`` in that variable order.
    """
    a = delta - va
    s, c = np.sin(a), np.cos(a)
    vd, vq = vm * s, vm * c
    z = np.zeros_like(a)
    one = np.ones_like(a)
    dvd = np.array([vm * c, z, z, -vm * c, s])
    dvq = np.array([-vm * s, z, z, vm * s, c])
    deq = np.array([z, one, z, z, z])
    ded = np.array([z, z, one, z, z])
    i_d = (eq - vq) / xd1
    i_q = (vd - ed) / xq1
    did = (deq - dvq) / xd1
    diq = (dvd - ded) / xq1
    dpe = dvd * i_d + vd * did + dvq * i_q + vq * diq
    dqe = dvq * i_d + vq * did - dvd * i_q - vd * diq
    return did, diq, dpe, dqe


def machine_derivatives(machine: Machine, state, terminal, p_m, e_fd, f_nom=50.0):
    """Time derivatives of (delta, omega, e'_q, e'_d) for one machine.

    All quantities are per unit on the machine's own rating; ``terminal``
    is ``(V, theta)``.
    """
    delta, omega, eq, ed = state
    vm, va = terminal
    out = two_axis(
        delta, omega, eq, ed, vm, va, p_m, e_fd,
        M=2.0 * machine.H, D=machine.D, xd=machine.x_d, xq=machine.x_q,
        xd1=machine.x_d_prime, xq1=machine.x_q_prime,
        Td0=machine.T_d0_prime, Tq0=machine.T_q0_prime,
        omega_b=2 * np.pi * f_nom,
    )
    return np.array(out[:4], dtype=float)


def machine_equilibrium(machine: Machine, vm, va, p, q):
    """Back-solve (delta, e'_q, e'_d, e_fd) from terminal conditions (machine base)."""
    V = vm * np.exp(1j * va)
    I = np.conj((p + 1j * q) / V)
    delta = np.angle(V + 1j * machine.x_q * I)
    rot = np.exp(1j * (np.pi / 2 - delta))
    vdq, idq = V * rot, I * rot
    vd, vq, i_d, i_q = vdq.real, vdq.imag, idq.real, idq.imag
    eq = vq + machine.x_d_prime * i_d
    ed = vd - machine.x_q_prime * i_q
    efd = eq + (machine.x_d - machine.x_d_prime) * i_d
    return delta, eq, ed, efd


# ---------------------------------------------------------------------------
# excitation and governor


def exciter_derivative(v_r, vm, v_ref, K_a, T_a):
    """First-order exciter; the field voltage is ``clip(v_r, efd_min, efd_max)``."""
    return (K_a * (v_ref - vm) - v_r) / T_a


def governor_derivatives(x_g, p_m, omega, dp_agc, *, p_ref, gain, db_pu, T_g, T_t, p_min, p_max):
    """Droop + deadband, first-order servo, first-order turbine.

    ``gain`` is ``1/R`` expressed on the power base of ``p_ref``; the
    servo output is saturated before it reaches the turbine, which keeps
    ``p_m`` inside ``[p_min, p_max]`` whenever it starts there.
    """
    d_xg = (p_ref + dp_agc - gain * deadband(omega - 1.0, db_pu) - x_g) / T_g
    d_pm = (_clip(x_g, p_min, p_max) - p_m) / T_t
    return d_xg, d_pm


@dataclass
class GovernorState:
    x_g: float
    p_m: float


def governor_output(tg: TurbineGovernor, omega: float, dp_i: float, dt: float,
                    state: GovernorState, p_ref: float, f_nom: float = 50.0) -> float:
    """Advance one governor by ``dt`` with its inputs held; returns p_m.

    Powers are on the machine base. Both lags are integrated exactly for a
    held input, so any ``dt`` works.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    db_pu = tg.deadband_hz / f_nom
    target = p_ref + dp_i - deadband(omega - 1.0, db_pu) / tg.R
    xg0, pm0 = state.x_g, state.p_m
    xg1 = target + (xg0 - target) * np.exp(-dt / tg.T_g)
    # turbine input is the saturated servo position; hold it at its mean
    # over the interval when the servo is not moving through a limit
    u0 = np.clip(xg0, tg.p_min, tg.p_max)
    u1 = np.clip(xg1, tg.p_min, tg.p_max)
    if tg.T_g != tg.T_t and u0 == xg0 and u1 == xg1:
        a, b = 1.0 / tg.T_g, 1.0 / tg.T_t
        c = xg0 - target
        pm1 = (target + (pm0 - target) * np.exp(-b * dt)
               + c * b / (b - a) * (np.exp(-a * dt) - np.exp(-b * dt)))
    else:
        u = 0.5 * (u0 + u1)
        pm1 = u + (pm0 - u) * np.exp(-dt / tg.T_t)
    state.x_g, state.p_m = float(xg1), float(np.clip(pm1, tg.p_min, tg.p_max))
    return state.p_m


# ---------------------------------------------------------------------------
# wind: aerodynamics, APC and the DFIG plant


def power_coefficient(tsr, beta):
    """Rotor power coefficient and its partials w.r.t. tip-speed ratio and pitch (deg)."""
    u = tsr + 0.08 * beta
    b2 = beta * beta
    w = b2 * beta + 1.0
    inv = 1.0 / u - 0.035 / w
    e = np.exp(-12.5 * inv)
    core = 116.0 * inv - 0.4 * beta - 5.0
    cp = 0.22 * core * e
    dcp_dinv = 0.22 * e * (116.0 - 12.5 * core)
    iu2 = 1.0 / (u * u)
    dinv_dtsr = -iu2
    dinv_dbeta = -0.08 * iu2 + 0.105 * b2 / (w * w)
    return cp, dcp_dinv * dinv_dtsr, dcp_dinv * dinv_dbeta - 0.088 * e


def _optimum():
    res = minimize_scalar(lambda x: -power_coefficient(x, 0.0)[0], bounds=(2.0, 15.0),
                          method="bounded", options={"xatol": 1e-12})
    return float(res.x), float(power_coefficient(res.x, 0.0)[0])


TSR_OPT, CP_MAX = _optimum()


def aero_power(omega_r, beta, v_wind, v_rated):
    """Aerodynamic power (pu of rating) with partials w.r.t. omega_r and beta.

    Scaled so that rated wind at rated speed with zero pitch gives 1 pu and
    the optimal tip-speed ratio is hit at ``omega_r = v / v_rated``.
    """
    v = np.maximum(v_wind, 0.1)
    k = TSR_OPT * v_rated
    tsr = k * omega_r / v
    cp, dcp_dtsr, dcp_dbeta = power_coefficient(tsr, beta)
    r = v / v_rated
    scale = r * r * r / CP_MAX
    return scale * cp, scale * dcp_dtsr * k / v, scale * dcp_dbeta


def apc_power_offset(f, deadband_hz, R_apc, headroom, floor=np.inf, f_nom=50.0):
    """Droop response of a wind farm's active power control, pu of rating.

    Zero inside the deadband, linear in the excess deviation outside it,
    limited to ``headroom`` upward and ``floor`` downward.
    """
    excess = deadband(np.asarray(f, dtype=float) - f_nom, deadband_hz)
    return _clip(-excess / f_nom / R_apc, -floor, headroom)


def apc_slope(f, deadband_hz, R_apc, headroom, floor=np.inf, f_nom=50.0):
    """d(offset)/d(f in pu)."""
    raw = -deadband(f - f_nom, deadband_hz) / f_nom / R_apc
    inside = (raw > -floor) & (raw < headroom)
    return np.where(inside, -deadband_slope(f - f_nom, deadband_hz) / R_apc, 0.0)


def mppt_reference(omega_r):
    """Cubic optimal-power curve, saturated at rated power."""
    w = _clip(omega_r, 0.0, 1.0)
    return w * w * w


def dfig_rhs(omega_r, i_rd, i_rq, beta, f_m, vm, v_wind, f_coi, *,
             H_w, v_rated, T_i, T_v, K_v, v_ref, K_pitch, T_pitch, T_f,
             apc_on, apc_db, R_apc, headroom, floor, f_nom=50.0):
    """State derivatives of the aggregated DFIG plant (pu of plant rating).

    States: rotor speed, reactive (d) and active (q) rotor-current
    components, pitch angle (deg), filtered frequency (pu). The converter
    current loops are first-order lags; injected P = V*i_rq, Q = V*i_rd.
    Returns ``(d_omega_r, d_ird, d_irq, d_beta, d_fm, p_ref)``.
    """
    pa, _, _ = aero_power(omega_r, beta, v_wind, v_rated)
    pe = vm * i_rq
    p_ref = mppt_reference(omega_r)
    if apc_on:
        p_ref = p_ref + apc_power_offset(f_m * f_nom, apc_db, R_apc, headroom, floor, f_nom)
    p_ref = _clip(p_ref, 0.0, 1.0)
    d_wr = (pa - pe) / (2.0 * H_w * omega_r)
    d_ird = (K_v * (v_ref - vm) - i_rd) / T_v
    d_irq = (p_ref / vm - i_rq) / T_i
    d_beta = (_clip(K_pitch * (omega_r - 1.0), 0.0, PITCH_MAX_DEG) - beta) / T_pitch
    d_fm = (f_coi - f_m) / T_f
    return d_wr, d_ird, d_irq, d_beta, d_fm, p_ref


def dfig_derivatives(plant, state, terminal, wind_speed, f_meas, v_ref, *,
                     apc_on=False, apc_deadband=0.2, f_nom=50.0):
    """Single-plant wrapper around :func:`dfig_rhs`; ``f_meas`` in Hz."""
    if wind_speed < 0:
        raise ValueError("wind speed must be >= 0")
    omega_r, i_rd, i_rq, beta, f_m = state
    vm, _ = terminal
    out = dfig_rhs(
        omega_r, i_rd, i_rq, beta, f_m, vm, wind_speed, f_meas / f_nom,
        H_w=plant.H_w, v_rated=plant.v_rated, T_i=plant.T_i, T_v=plant.T_v, K_v=plant.K_v,
        v_ref=v_ref, K_pitch=plant.K_pitch, T_pitch=plant.T_pitch, T_f=plant.T_f,
        apc_on=apc_on, apc_db=apc_deadband, R_apc=plant.R_apc,
        headroom=plant.apc_headroom, floor=plant.apc_floor, f_nom=f_nom,
    )
    return np.array(out[:5], dtype=float)


def dfig_equilibrium(plant, vm, p, q):
    """Initial states, mean wind speed and voltage reference from dispatch (plant pu)."""
    if not 0.0 < p <= 1.0:
        raise ValueError(f"wind plant {plant.id}: dispatch {p:.4f} pu outside (0, 1]")
    omega_r = p ** (1.0 / 3.0)
    i_rq = p / vm
    i_rd = q / vm
    v_mean = plant.v_rated * omega_r
    v_ref = vm + i_rd / plant.K_v
    return np.array([omega_r, i_rd, i_rq, 0.0, 1.0]), v_mean, v_ref


# ---------------------------------------------------------------------------
# battery fast frequency response


@dataclass
class BessFfr:
    """Under-frequency triggered battery response; the state is part of z."""

    unit: BessUnit
    active: bool = False
    below_since: float | None = None
    activations: int = 0
    history: list = field(default_factory=list)

    def power(self, f: float, t: float) -> float:
        u = self.unit
        if self.active:
            if f > u.f_trig + u.hysteresis:
                self.active = False
                self.below_since = None
                self.history.append((t, "armed"))
        elif f < u.f_trig:
            if self.below_since is None:
                self.below_since = t
            if t - self.below_since >= u.delay - 1e-12:
                self.active = True
                self.activations += 1
                self.history.append((t, "active"))
        else:
            self.below_since = None
        return u.p_ffr if self.active else 0.0

    @property
    def state(self) -> str:
        return "active" if self.active else "armed"


def bess_power(bess: BessFfr, f: float, t: float) -> float:
    return bess.power(f, t)


# ---------------------------------------------------------------------------
# loads


def effective_load(p0, q0, eta):
    """Constant-power load with multiplicative noise; power factor kept."""
    scale = np.maximum(1.0 + eta, 0.0)
    return p0 * scale, q0 * scale
