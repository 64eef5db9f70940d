"""Compiled residual and chord-Newton loop for the time-domain solver.

These mirror the vectorized device functions in :mod:`freqquality.devices`
equation for equation; ``SystemModel.evaluate_reference`` assembles the
same residual from those functions and the tests hold the two together.
Parameters arrive packed in row-major blocks (see ``SystemModel.pack``).
"""

from __future__ import annotations

import numpy as np
from numba import njit

# rows of the packed machine parameter block
M_M, M_D, M_XD, M_XQ, M_XD1, M_XQ1, M_TD0, M_TQ0 = range(8)
M_KA, M_TA, M_EMIN, M_EMAX, M_GAIN, M_DB, M_TG, M_TT, M_PMIN, M_PMAX = range(8, 18)
N_MPAR = 18
# rows of the packed wind parameter block
W_H, W_VR, W_TI, W_TV, W_KV, W_KP, W_TP, W_TF, W_RAPC, W_HEAD, W_FLOOR, W_SCALE = range(12)
N_WPAR = 12
# rows of the packed input blocks
U_PREF, U_VREF, U_DP, U_INS = range(4)
UW_SPEED, UW_VREF = range(2)
UB_PLOAD, UB_QLOAD, UB_PINJ = range(3)


@njit(cache=True)
def _clip(v, lo, hi):
    return min(max(v, lo), hi)


@njit(cache=True)
def residual(x, y, mbus, wbus, mpar, wpar, G, B, um, uw, ub, scal, f, g):
    """Fill ``f`` and ``g``; returns omega_CoI.

    ``scal`` = (omega_b, f_nom, apc_on, apc_db, tsr_opt, cp_max, pitch_max).
    """
    nb = G.shape[0]
    nm = mbus.shape[0]
    nw = wbus.shape[0]
    omega_b, f_nom, apc_on, apc_db = scal[0], scal[1], scal[2], scal[3]
    tsr_opt, cp_max, pitch_max = scal[4], scal[5], scal[6]
    va = y[:nb]
    vm = y[nb:]

    # network: S = V conj(Y V)
    for k in range(nb):
        p = 0.0
        q = 0.0
        for j in range(nb):
            gkj = G[k, j]
            bkj = B[k, j]
            if gkj == 0.0 and bkj == 0.0:
                continue
            a = va[k] - va[j]
            c = np.cos(a)
            s = np.sin(a)
            p += vm[j] * (gkj * c + bkj * s)
            q += vm[j] * (gkj * s - bkj * c)
        g[k] = ub[UB_PINJ, k] - ub[UB_PLOAD, k] - vm[k] * p
        g[nb + k] = -ub[UB_QLOAD, k] - vm[k] * q

    wsum = 0.0
    wom = 0.0
    for i in range(nm):
        mi = mpar[M_M, i] * um[U_INS, i]
        wsum += mi
        wom += mi * x[nm + i]
    omega_coi = wom / wsum

    for i in range(nm):
        s_i = um[U_INS, i]
        k = mbus[i]
        delta = x[i]
        omega = x[nm + i]
        eq = x[2 * nm + i]
        ed = x[3 * nm + i]
        vr = x[4 * nm + i]
        xg = x[5 * nm + i]
        pm = x[6 * nm + i]
        a = delta - va[k]
        vd = vm[k] * np.sin(a)
        vq = vm[k] * np.cos(a)
        i_d = (eq - vq) / mpar[M_XD1, i]
        i_q = (vd - ed) / mpar[M_XQ1, i]
        pe = vd * i_d + vq * i_q
        qe = vq * i_d - vd * i_q
        efd = _clip(vr, mpar[M_EMIN, i], mpar[M_EMAX, i])
        dw = omega - 1.0
        db = mpar[M_DB, i]
        f[i] = omega_b * dw * s_i
        f[nm + i] = (pm - pe - mpar[M_D, i] * dw) / mpar[M_M, i] * s_i
        f[2 * nm + i] = (-eq - (mpar[M_XD, i] - mpar[M_XD1, i]) * i_d + efd) / mpar[M_TD0, i] * s_i
        f[3 * nm + i] = (-ed + (mpar[M_XQ, i] - mpar[M_XQ1, i]) * i_q) / mpar[M_TQ0, i] * s_i
        f[4 * nm + i] = (mpar[M_KA, i] * (um[U_VREF, i] - vm[k]) - vr) / mpar[M_TA, i] * s_i
        f[5 * nm + i] = ((um[U_PREF, i] + um[U_DP, i] - mpar[M_GAIN, i] * (dw - _clip(dw, -db, db))
                          - xg) / mpar[M_TG, i] * s_i)
        f[6 * nm + i] = (_clip(xg, mpar[M_PMIN, i], mpar[M_PMAX, i]) - pm) / mpar[M_TT, i] * s_i
        g[k] += pe * s_i
        g[nb + k] += qe * s_i

    o = 7 * nm
    for j in range(nw):
        k = wbus[j]
        wr = x[o + j]
        ird = x[o + nw + j]
        irq = x[o + 2 * nw + j]
        beta = x[o + 3 * nw + j]
        fm = x[o + 4 * nw + j]
        v = max(uw[UW_SPEED, j], 0.1)
        v_rated = wpar[W_VR, j]
        tsr = tsr_opt * v_rated * wr / v
        u_ = tsr + 0.08 * beta
        inv = 1.0 / u_ - 0.035 / (beta * beta * beta + 1.0)
        cp = 0.22 * (116.0 * inv - 0.4 * beta - 5.0) * np.exp(-12.5 * inv)
        r = v / v_rated
        pa = r * r * r / cp_max * cp
        vk = vm[k]
        wc = _clip(wr, 0.0, 1.0)
        pref = wc * wc * wc
        if apc_on != 0.0:
            dev = fm * f_nom - f_nom
            excess = dev - _clip(dev, -apc_db, apc_db)
            pref += _clip(-excess / f_nom / wpar[W_RAPC, j], -wpar[W_FLOOR, j], wpar[W_HEAD, j])
        pref = _clip(pref, 0.0, 1.0)
        f[o + j] = (pa - vk * irq) / (2.0 * wpar[W_H, j] * wr)
        f[o + nw + j] = (wpar[W_KV, j] * (uw[UW_VREF, j] - vk) - ird) / wpar[W_TV, j]
        f[o + 2 * nw + j] = (pref / vk - irq) / wpar[W_TI, j]
        f[o + 3 * nw + j] = (_clip(wpar[W_KP, j] * (wr - 1.0), 0.0, pitch_max) - beta) / wpar[W_TP, j]
        f[o + 4 * nw + j] = (omega_coi - fm) / wpar[W_TF, j]
        g[k] += wpar[W_SCALE, j] * vk * irq
        g[nb + k] += wpar[W_SCALE, j] * vk * ird
    return omega_coi


@njit(cache=True)
def lu_solve_inplace(lu, piv, b):
    """Solve with a LAPACK getrf factorization (``scipy.linalg.lu_factor`` output)."""
    n = b.shape[0]
    for i in range(n):
        p = piv[i]
        if p != i:
            tmp = b[i]
            b[i] = b[p]
            b[p] = tmp
    for i in range(n):
        acc = b[i]
        for j in range(i):
            acc -= lu[i, j] * b[j]
        b[i] = acc
    for i in range(n - 1, -1, -1):
        acc = b[i]
        for j in range(i + 1, n):
            acc -= lu[i, j] * b[j]
        b[i] = acc / lu[i, i]


@njit(cache=True)
def chord_newton(x, y, x0, f0, h, lu, piv, has_lu, allow_refresh, it, prev, tol, max_iter,
                 mbus, wbus, mpar, wpar, G, B, um, uw, ub, scal, f, g):
    """Chord iterations on the trapezoidal residual, updating x and y in place.

    Returns ``(status, it, prev, err)`` with status 0 = converged,
    1 = caller should refactor at the current point, 2 = failed.
    """
    nx = x.shape[0]
    ny = y.shape[0]
    r = np.empty(nx + ny)
    err = np.inf
    while True:
        residual(x, y, mbus, wbus, mpar, wpar, G, B, um, uw, ub, scal, f, g)
        err = 0.0
        for i in range(nx):
            r[i] = -(x[i] - x0[i] - h * (f[i] + f0[i]))
            err = max(err, abs(r[i]))
        for i in range(ny):
            r[nx + i] = -g[i]
            err = max(err, abs(g[i]))
        if err < tol:
            return 0, it, prev, err
        if it >= max_iter or not np.isfinite(err):
            return 2, it, prev, err
        if not has_lu or (allow_refresh and (it >= 3 or err > 0.3 * prev)):
            return 1, it, prev, err
        prev = err
        lu_solve_inplace(lu, piv, r)
        for i in range(nx):
            x[i] += r[i]
        for i in range(ny):
            y[i] += r[nx + i]
        it += 1
