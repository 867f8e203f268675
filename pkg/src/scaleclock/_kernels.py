"""Fixed-step RK4 kernels for the eigenfunction ODE, with renormalisation.

The eigen equation d/dm d+/ds u = lam u is integrated either in SDE form

    u'' = lam * a1(x) * u + a2(x) * u',   a1 = 2/sigma^2, a2 = -2 b / sigma^2,

or in scale form

    u' = w * s'(x),   w' = lam * u * m'(x),

with coefficients pre-sampled on the half-step grid (index 2k, 2k+1, 2k+2
for step k).  Solutions grow like exp(const * x), so the pair is jointly
rescaled whenever its magnitude leaves [1e-250, 1e250]; the accumulated log
factor is returned alongside.  Sign scans (used by the spectral-bottom
bisection) only need the renormalised sign, which is unaffected.

Kernels are jit-compiled when numba is importable and fall back to the same
pure-Python bodies otherwise.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except Exception:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def deco(f):
            return f

        return deco


_BIG = 1e250
_SMALL = 1e-250


@njit(cache=True)
def rk4_sde_record(a1, a2, lam, h, u0, p0):
    """Integrate the SDE-form system recording (u, p, logscale) per node.

    Returns (u, p, logscale, status); status is -1 on success, otherwise the
    index of the first node with a non-finite value.
    """
    n = (a1.shape[0] - 1) // 2
    u_out = np.empty(n + 1)
    p_out = np.empty(n + 1)
    ls_out = np.empty(n + 1)
    u = u0
    p = p0
    ls = 0.0
    u_out[0] = u
    p_out[0] = p
    ls_out[0] = ls
    for k in range(n):
        i0 = 2 * k
        i1 = 2 * k + 1
        i2 = 2 * k + 2
        k1u = p
        k1p = lam * a1[i0] * u + a2[i0] * p
        uu = u + 0.5 * h * k1u
        pp = p + 0.5 * h * k1p
        k2u = pp
        k2p = lam * a1[i1] * uu + a2[i1] * pp
        uu = u + 0.5 * h * k2u
        pp = p + 0.5 * h * k2p
        k3u = pp
        k3p = lam * a1[i1] * uu + a2[i1] * pp
        uu = u + h * k3u
        pp = p + h * k3p
        k4u = pp
        k4p = lam * a1[i2] * uu + a2[i2] * pp
        u = u + h / 6.0 * (k1u + 2.0 * k2u + 2.0 * k3u + k4u)
        p = p + h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
        if not (math.isfinite(u) and math.isfinite(p)):
            return u_out, p_out, ls_out, k + 1
        m = abs(u)
        if abs(p) > m:
            m = abs(p)
        if m > _BIG or (0.0 < m < _SMALL):
            u /= m
            p /= m
            ls += math.log(m)
        u_out[k + 1] = u
        p_out[k + 1] = p
        ls_out[k + 1] = ls
    return u_out, p_out, ls_out, -1


@njit(cache=True)
def rk4_sde_scan(a1, a2, lam, h, u0, p0):
    """Sign scan of the SDE-form solution.

    Returns the index of the first node (>= 1) where u <= 0, -1 when u stays
    positive over the whole grid, and -2 on numerical breakdown.
    """
    n = (a1.shape[0] - 1) // 2
    u = u0
    p = p0
    for k in range(n):
        i0 = 2 * k
        i1 = 2 * k + 1
        i2 = 2 * k + 2
        k1u = p
        k1p = lam * a1[i0] * u + a2[i0] * p
        uu = u + 0.5 * h * k1u
        pp = p + 0.5 * h * k1p
        k2u = pp
        k2p = lam * a1[i1] * uu + a2[i1] * pp
        uu = u + 0.5 * h * k2u
        pp = p + 0.5 * h * k2p
        k3u = pp
        k3p = lam * a1[i1] * uu + a2[i1] * pp
        uu = u + h * k3u
        pp = p + h * k3p
        k4u = pp
        k4p = lam * a1[i2] * uu + a2[i2] * pp
        u = u + h / 6.0 * (k1u + 2.0 * k2u + 2.0 * k3u + k4u)
        p = p + h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
        if not (math.isfinite(u) and math.isfinite(p)):
            return -2
        if u <= 0.0:
            return k + 1
        m = abs(u)
        if abs(p) > m:
            m = abs(p)
        if m > _BIG or (0.0 < m < _SMALL):
            u /= m
            p /= m
    return -1


@njit(cache=True)
def rk4_scale_record(sp, mp, lam, h, u0, w0):
    """Integrate the scale-form system recording (u, w, logscale) per node."""
    n = (sp.shape[0] - 1) // 2
    u_out = np.empty(n + 1)
    w_out = np.empty(n + 1)
    ls_out = np.empty(n + 1)
    u = u0
    w = w0
    ls = 0.0
    u_out[0] = u
    w_out[0] = w
    ls_out[0] = ls
    for k in range(n):
        i0 = 2 * k
        i1 = 2 * k + 1
        i2 = 2 * k + 2
        k1u = w * sp[i0]
        k1w = lam * u * mp[i0]
        uu = u + 0.5 * h * k1u
        ww = w + 0.5 * h * k1w
        k2u = ww * sp[i1]
        k2w = lam * uu * mp[i1]
        uu = u + 0.5 * h * k2u
        ww = w + 0.5 * h * k2w
        k3u = ww * sp[i1]
        k3w = lam * uu * mp[i1]
        uu = u + h * k3u
        ww = w + h * k3w
        k4u = ww * sp[i2]
        k4w = lam * uu * mp[i2]
        u = u + h / 6.0 * (k1u + 2.0 * k2u + 2.0 * k3u + k4u)
        w = w + h / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w)
        if not (math.isfinite(u) and math.isfinite(w)):
            return u_out, w_out, ls_out, k + 1
        m = abs(u)
        if abs(w) > m:
            m = abs(w)
        if m > _BIG or (0.0 < m < _SMALL):
            u /= m
            w /= m
            ls += math.log(m)
        u_out[k + 1] = u
        w_out[k + 1] = w
        ls_out[k + 1] = ls
    return u_out, w_out, ls_out, -1


@njit(cache=True)
def rk4_scale_scan(sp, mp, lam, h, u0, w0):
    """Sign scan of the scale-form solution; same contract as rk4_sde_scan."""
    n = (sp.shape[0] - 1) // 2
    u = u0
    w = w0
    for k in range(n):
        i0 = 2 * k
        i1 = 2 * k + 1
        i2 = 2 * k + 2
        k1u = w * sp[i0]
        k1w = lam * u * mp[i0]
        uu = u + 0.5 * h * k1u
        ww = w + 0.5 * h * k1w
        k2u = ww * sp[i1]
        k2w = lam * uu * mp[i1]
        uu = u + 0.5 * h * k2u
        ww = w + 0.5 * h * k2w
        k3u = ww * sp[i1]
        k3w = lam * uu * mp[i1]
        uu = u + h * k3u
        ww = w + h * k3w
        k4u = ww * sp[i2]
        k4w = lam * uu * mp[i2]
        u = u + h / 6.0 * (k1u + 2.0 * k2u + 2.0 * k3u + k4u)
        w = w + h / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w)
        if not (math.isfinite(u) and math.isfinite(w)):
            return -2
        if u <= 0.0:
            return k + 1
        m = abs(u)
        if abs(w) > m:
            m = abs(w)
        if m > _BIG or (0.0 < m < _SMALL):
            u /= m
            w /= m
    return -1
