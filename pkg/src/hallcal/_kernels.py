"""Compiled inner loops shared by the truth and model simulators.

Everything here works on plain arrays so numba can compile it; the public
wrappers in :mod:`hallcal.reconstruction` and :mod:`hallcal.simulation`
validate inputs and translate status codes into exceptions.
"""

import math

import numpy as np
from numba import njit

TWO_PI = 2.0 * math.pi
SQRT3 = math.sqrt(3.0)

BASIS_FOURIER = 0
BASIS_KERNEL = 1

OK = 0
DIVERGED = 1
DEGENERATE = 2


@njit(cache=True)
def unwrap(y_now, y_prev):
    return y_prev + ((y_now - y_prev + math.pi) % TWO_PI) - math.pi


@njit(cache=True)
def clarke_ab(d1, d2, d3):
    a = (2.0 / 3.0) * (d1 - 0.5 * d2 - 0.5 * d3)
    b = (2.0 / 3.0) * (SQRT3 / 2.0) * (d2 - d3)
    return a, b


@njit(cache=True)
def eta_interp(knots, eta, y):
    """Periodic piecewise-linear lookup on an extended, sorted knot table.

    ``knots`` holds the sorted knots in [0, 2pi) with one wrapped copy
    prepended (``last - 2pi``) and one appended (``first + 2pi``).
    """
    w = y % TWO_PI
    if w >= TWO_PI:
        w -= TWO_PI
    i = np.searchsorted(knots, w, side="right") - 1
    if i < 0:
        i = 0
    elif i > knots.shape[0] - 2:
        i = knots.shape[0] - 2
    k0 = knots[i]
    k1 = knots[i + 1]
    return eta[i] + (w - k0) / (k1 - k0) * (eta[i + 1] - eta[i])


@njit(cache=True)
def fill_basis(y0, kind, harmonics, csin, ccos, sf2, inv2l2, out):
    if kind == BASIS_FOURIER:
        out[0] = 1.0
        for i in range(harmonics.shape[0]):
            arg = harmonics[i] * y0
            out[1 + 2 * i] = math.sin(arg)
            out[2 + 2 * i] = math.cos(arg)
    else:
        s = math.sin(y0)
        c = math.cos(y0)
        for j in range(csin.shape[0]):
            ds = s - csin[j]
            dc = c - ccos[j]
            out[j] = sf2 * math.exp(-(ds * ds + dc * dc) * inv2l2)


@njit(cache=True)
def reconstruct(d, n_m, phi0, knots, eta, use_lut, out):
    """Chained reconstruction of an (N, 3) voltage sequence; returns (status, index)."""
    phi = phi0
    for k in range(d.shape[0]):
        a, b = clarke_ab(d[k, 0], d[k, 1], d[k, 2])
        if a == 0.0 and b == 0.0:
            return DEGENERATE, k
        y = unwrap(math.atan2(b, a), n_m * phi) / n_m
        if use_lut:
            y += eta_interp(knots, eta, y)
        out[k] = y
        phi = y
    return OK, -1


@njit(cache=True)
def closed_loop(coef, kind, harmonics, csin, ccos, sf2, inv2l2,
                Ag, Bg, Cg, Ac, Bc, Cc, Dc,
                r, noise, td, n_m, knots, eta, use_lut,
                y0_bound, t_bound,
                d_out, y_out, t_out, y0_out):
    """Sampled feedback loop: sensors -> reconstruction -> controller -> plant.

    The plant must be strictly proper (no direct feedthrough). Returns
    ``(status, index)``; ``status`` is OK, DIVERGED or DEGENERATE.
    """
    n = r.shape[0]
    ng = Ag.shape[0]
    nc = Ac.shape[0]
    m = coef.shape[1]
    xg = np.zeros(ng)
    xg_new = np.zeros(ng)
    xc = np.zeros(nc)
    xc_new = np.zeros(nc)
    beta = np.empty(m)
    phi = 0.0
    for k in range(n):
        y0 = 0.0
        for i in range(ng):
            y0 += Cg[i] * xg[i]
        if not (abs(y0) < y0_bound):
            return DIVERGED, k
        fill_basis(y0, kind, harmonics, csin, ccos, sf2, inv2l2, beta)
        for h in range(3):
            acc = 0.0
            for j in range(m):
                acc += coef[h, j] * beta[j]
            d_out[k, h] = acc + noise[k, h]
        a, b = clarke_ab(d_out[k, 0], d_out[k, 1], d_out[k, 2])
        if a == 0.0 and b == 0.0:
            return DEGENERATE, k
        y = unwrap(math.atan2(b, a), n_m * phi) / n_m
        if use_lut:
            y += eta_interp(knots, eta, y)
        phi = y
        e = r[k] - y
        tu = Dc * e
        for i in range(nc):
            tu += Cc[i] * xc[i]
        for i in range(nc):
            acc = Bc[i] * e
            for j in range(nc):
                acc += Ac[i, j] * xc[j]
            xc_new[i] = acc
        for i in range(nc):
            xc[i] = xc_new[i]
        torque = tu + td[k]
        if not (abs(torque) < t_bound):
            return DIVERGED, k
        for i in range(ng):
            acc = Bg[i] * torque
            for j in range(ng):
                acc += Ag[i, j] * xg[j]
            xg_new[i] = acc
        for i in range(ng):
            xg[i] = xg_new[i]
        y_out[k] = y
        t_out[k] = tu
        y0_out[k] = y0
    return OK, -1


@njit(cache=True)
def open_loop(coef, kind, harmonics, csin, ccos, sf2, inv2l2,
              Ag, Bg, Cg, u, n_m, y0_out, y_out):
    """Drive the plant with a recorded input and reconstruct with ``f_init``."""
    n = u.shape[0]
    ng = Ag.shape[0]
    m = coef.shape[1]
    xg = np.zeros(ng)
    xg_new = np.zeros(ng)
    beta = np.empty(m)
    phi = 0.0
    for k in range(n):
        y0 = 0.0
        for i in range(ng):
            y0 += Cg[i] * xg[i]
        fill_basis(y0, kind, harmonics, csin, ccos, sf2, inv2l2, beta)
        dv = np.zeros(3)
        for h in range(3):
            acc = 0.0
            for j in range(m):
                acc += coef[h, j] * beta[j]
            dv[h] = acc
        a, b = clarke_ab(dv[0], dv[1], dv[2])
        if a == 0.0 and b == 0.0:
            return DEGENERATE, k
        y = unwrap(math.atan2(b, a), n_m * phi) / n_m
        phi = y
        y0_out[k] = y0
        y_out[k] = y
        for i in range(ng):
            acc = Bg[i] * u[k]
            for j in range(ng):
                acc += Ag[i, j] * xg[j]
            xg_new[i] = acc
        for i in range(ng):
            xg[i] = xg_new[i]
    return OK, -1
