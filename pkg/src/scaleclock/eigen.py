"""Eigenfunctions of d/dm d+/ds, the spectral bottom, and hitting-time laws.

The central object is the increasing eigenfunction psi_lam solving

    u(x) = s(x) + lam * int_0^x ds(y) int_0^y u dm,

normalised so u ~ s near 0.  It exists for every real lam; for
lam in [-lambda0, 0] it is positive and concave in the scale coordinate,
and lam*psi_{-lam} dm is a quasi-stationary density for lam in (0, lambda0].
The module provides a fixed-step RK4 solver, closed forms for the two
builtin families, a bisection estimator of lambda0, the hitting-time
Laplace transforms, and quasi-stationary densities.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Optional

import numpy as np
from scipy import integrate, interpolate, special

from . import _kernels
from .diffusion import DiffusionSpec, lambda0_positivity_check, to_natural_scale
from .measures import (
    EvaluationError,
    PreconditionError,
    improper_integral,
)


class RangeError(ValueError):
    """A parameter left the range in which the quantity is defined."""


# switch from scipy's Kummer M to its large-argument expansion
_KUMMER_ASYMPTOTIC_Z = 400.0


@dataclasses.dataclass(frozen=True)
class EigenFn:
    """Evaluator for psi_lam and its scale derivative on [0, L_max].

    ``deriv_scale`` is d psi / ds (non-increasing for lam <= 0, which is the
    concavity of psi in the scale coordinate); ``right_derivative`` is the
    spatial derivative d+ psi / dx = (d psi/ds) s'(x), equal to s'(0) at 0.
    Closed-form instances also expose ``log_value`` for tail work.
    """

    lam: float
    L_max: float
    source: str
    grid: np.ndarray
    spec: DiffusionSpec
    _value: Callable = dataclasses.field(repr=False, default=None)
    _deriv_scale: Callable = dataclasses.field(repr=False, default=None)
    _log_value: Optional[Callable] = dataclasses.field(repr=False, default=None)
    _dlog_value: Optional[Callable] = dataclasses.field(repr=False, default=None)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        self._check_domain(x)
        return self._value(x)

    def deriv_scale(self, x):
        x = np.asarray(x, dtype=float)
        self._check_domain(x)
        return self._deriv_scale(x)

    def right_derivative(self, x):
        return self.deriv_scale(x) * self.spec.scale.deriv(x)

    def log_value(self, x):
        x = np.asarray(x, dtype=float)
        if self._log_value is not None:
            return self._log_value(x)
        self._check_domain(x)
        with np.errstate(divide="ignore"):
            return np.log(self._value(x))

    def dlog_value(self, x):
        """d/dx log psi, stable for closed forms at large x."""
        x = np.asarray(x, dtype=float)
        if self._dlog_value is not None:
            return self._dlog_value(x)
        return self.right_derivative(x) / self.value(x)

    def _check_domain(self, x):
        if self.source == "solver" and np.any(x > self.L_max * (1 + 1e-12)):
            raise RangeError(f"solver eigenfunction evaluated beyond L_max={self.L_max}")
        if np.any(x < 0):
            raise PreconditionError("eigenfunction evaluated left of 0")


def _rk4_record_extended(a1, a2, lam, h, u0, p0, sde_form: bool):
    """Extended-precision RK4 for the recording solve at lam < 0.

    Near the spectral bottom the solved eigenfunction is the subdominant
    solution; float64 roundoff seeds the dominant mode, which can grow like
    exp(c x^2) relative to it.  Integrating in long double pushes that seed
    three orders of magnitude down.  Python-level loop; only used for
    recording solves, never inside the spectral scan.
    """
    ld = np.longdouble
    a1 = a1.astype(ld)
    a2 = a2.astype(ld)
    lam = ld(lam)
    h = ld(h)
    n = (a1.shape[0] - 1) // 2
    u_out = np.empty(n + 1, dtype=ld)
    p_out = np.empty(n + 1, dtype=ld)
    u = ld(u0)
    p = ld(p0)
    u_out[0] = u
    p_out[0] = p
    half = ld(0.5)
    sixth = h / ld(6.0)

    if sde_form:
        for k in range(n):
            i0, i1, i2 = 2 * k, 2 * k + 1, 2 * k + 2
            k1u = p
            k1p = lam * a1[i0] * u + a2[i0] * p
            uu = u + half * h * k1u
            pp = p + half * h * k1p
            k2u = pp
            k2p = lam * a1[i1] * uu + a2[i1] * pp
            uu = u + half * h * k2u
            pp = p + half * h * k2p
            k3u = pp
            k3p = lam * a1[i1] * uu + a2[i1] * pp
            uu = u + h * k3u
            pp = p + h * k3p
            k4u = pp
            k4p = lam * a1[i2] * uu + a2[i2] * pp
            u = u + sixth * (k1u + 2 * k2u + 2 * k3u + k4u)
            p = p + sixth * (k1p + 2 * k2p + 2 * k3p + k4p)
            u_out[k + 1] = u
            p_out[k + 1] = p
    else:
        for k in range(n):
            i0, i1, i2 = 2 * k, 2 * k + 1, 2 * k + 2
            k1u = p * a1[i0]
            k1p = lam * u * a2[i0]
            uu = u + half * h * k1u
            pp = p + half * h * k1p
            k2u = pp * a1[i1]
            k2p = lam * uu * a2[i1]
            uu = u + half * h * k2u
            pp = p + half * h * k2p
            k3u = pp * a1[i1]
            k3p = lam * uu * a2[i1]
            uu = u + h * k3u
            pp = p + h * k3p
            k4u = pp * a1[i2]
            k4p = lam * uu * a2[i2]
            u = u + sixth * (k1u + 2 * k2u + 2 * k3u + k4u)
            p = p + sixth * (k1p + 2 * k2p + 2 * k3p + k4p)
            u_out[k + 1] = u
            p_out[k + 1] = p
    return u_out, p_out


def solve_psi(spec: DiffusionSpec, lam: float, L_max: float = 20.0, n_grid: int = 20000) -> EigenFn:
    """Solve the eigen equation by fixed-step RK4 on a uniform x grid.

    Integrates du = v ds, dv = lam u dm with u(0) = 0 and unit scale slope
    at 0 (the SDE form is used when coefficients are available, which is the
    same system in better-conditioned variables).  Negative lam runs in
    extended precision, see :func:`_rk4_record_extended`.  Raises
    ``RangeError`` when the solution overflows before reaching L_max.
    """
    if n_grid < 100:
        raise PreconditionError(f"n_grid must be >= 100, got {n_grid}")
    if L_max <= 0:
        raise PreconditionError("L_max must be positive")
    lam = float(lam)
    h = L_max / n_grid
    xs_half = np.linspace(0.0, L_max, 2 * n_grid + 1)
    grid = xs_half[::2]
    extended = lam < 0.0
    if spec.sde is not None:
        sig2 = np.asarray(spec.sde.sig(xs_half), dtype=float) ** 2
        a1 = 2.0 / sig2
        a2 = -2.0 * np.asarray(spec.sde.b(xs_half), dtype=float) / sig2
        p0 = float(spec.scale.deriv(np.array([0.0]))[0])
        if extended:
            u_ld, p_ld = _rk4_record_extended(a1, a2, lam, h, 0.0, p0, sde_form=True)
            if not (np.all(np.isfinite(u_ld)) and np.all(np.isfinite(p_ld))):
                raise RangeError("eigen solution overflows on [0, L_max]; reduce L_max")
            psi = u_ld.astype(float)
            sprime = np.asarray(spec.scale.deriv(grid), dtype=float)
            dscale = (p_ld / spec.scale.deriv(grid).astype(np.longdouble)).astype(float)
        else:
            u, p, ls, status = _kernels.rk4_sde_record(a1, a2, lam, h, 0.0, p0)
            if status >= 0:
                raise RangeError(f"eigen solve broke down near x={grid[min(status, n_grid)]:.3g}; reduce L_max")
            with np.errstate(over="raise"):
                try:
                    psi = u * np.exp(ls)
                    sprime = np.asarray(spec.scale.deriv(grid), dtype=float)
                    dscale = p * np.exp(ls) / sprime
                except FloatingPointError:
                    raise RangeError("eigen solution overflows on [0, L_max]; reduce L_max") from None
    else:
        sp = np.asarray(spec.scale.deriv(xs_half), dtype=float)
        mp = np.asarray(spec.speed(xs_half), dtype=float)
        if extended:
            u_ld, w_ld = _rk4_record_extended(sp, mp, lam, h, 0.0, 1.0, sde_form=False)
            if not (np.all(np.isfinite(u_ld)) and np.all(np.isfinite(w_ld))):
                raise RangeError("eigen solution overflows on [0, L_max]; reduce L_max")
            psi = u_ld.astype(float)
            dscale = w_ld.astype(float)
        else:
            u, w, ls, status = _kernels.rk4_scale_record(sp, mp, lam, h, 0.0, 1.0)
            if status >= 0:
                raise RangeError(f"eigen solve broke down near x={grid[min(status, n_grid)]:.3g}; reduce L_max")
            with np.errstate(over="raise"):
                try:
                    psi = u * np.exp(ls)
                    dscale = w * np.exp(ls)
                except FloatingPointError:
                    raise RangeError("eigen solution overflows on [0, L_max]; reduce L_max") from None
    if not (np.all(np.isfinite(psi)) and np.all(np.isfinite(dscale))):
        raise RangeError("eigen solution overflows on [0, L_max]; reduce L_max")

    # cubic Hermite keeps off-grid evaluations at solver accuracy
    sprime_grid = np.asarray(spec.scale.deriv(grid), dtype=float)
    spline = interpolate.CubicHermiteSpline(grid, psi, dscale * sprime_grid)
    value = lambda x: np.asarray(spline(np.asarray(x, dtype=float)), dtype=float)
    deriv = lambda x: np.interp(np.asarray(x, dtype=float), grid, dscale)
    return EigenFn(lam=lam, L_max=float(L_max), source="solver", grid=grid, spec=spec, _value=value, _deriv_scale=deriv)


def integral_equation_residual(spec: DiffusionSpec, eig: EigenFn) -> float:
    """Max relative residual of psi(x) - s(x) - lam int_0^x ds int_0^y psi dm.

    Uses cumulative Simpson on the eigen grid; the scale of the residual is
    measured against max(|s|, |psi|) pointwise.
    """
    xs = eig.grid
    psi = eig.value(xs)
    mp = np.asarray(eig.spec.speed(xs), dtype=float)
    sp = np.asarray(eig.spec.scale.deriv(xs), dtype=float)
    inner = np.concatenate([[0.0], integrate.cumulative_simpson(psi * mp, x=xs)])
    outer = np.concatenate([[0.0], integrate.cumulative_simpson(inner * sp, x=xs)])
    s_vals = np.asarray(eig.spec.scale(xs), dtype=float)
    resid = psi - s_vals - eig.lam * outer
    denom = np.maximum(np.abs(s_vals), np.abs(psi))
    denom[denom == 0] = 1.0
    return float(np.max(np.abs(resid) / denom))


def _log_sinh(u):
    u = np.asarray(u, dtype=float)
    return u + np.log1p(-np.exp(-2.0 * u)) - math.log(2.0)


def _kummer_m(a: float, b: float, z):
    """Kummer M(a, b, z) for z >= 0, switching to the e^z asymptotic branch."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = z <= _KUMMER_ASYMPTOTIC_Z
    with np.errstate(over="ignore"):
        out[small] = special.hyp1f1(a, b, z[small])
    zb = z[~small]
    if zb.size:
        out[~small] = np.exp(_kummer_log_m(a, b, zb))
    return out


def _kummer_log_m(a: float, b: float, z):
    """log M(a, b, z) for large positive z (a > 0)."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = z <= _KUMMER_ASYMPTOTIC_Z
    if np.any(small):
        with np.errstate(over="ignore", divide="ignore"):
            out[small] = np.log(special.hyp1f1(a, b, z[small]))
    zb = z[~small]
    if zb.size:
        # DLMF 13.7.1: M(a,b,z) ~ Gamma(b)/Gamma(a) e^z z^{a-b} sum_k (b-a)_k (1-a)_k / (k! z^k)
        corr = np.ones_like(zb)
        term = np.ones_like(zb)
        for k in range(1, 7):
            term = term * (b - a + k - 1) * (1 - a + k - 1) / (k * zb)
            corr = corr + term
        out[~small] = special.gammaln(b) - special.gammaln(a) + zb + (a - b) * np.log(zb) + np.log(corr)
    return out


def closed_form_psi(spec: DiffusionSpec, lam: float, L_max: float = math.inf) -> EigenFn:
    """Closed-form psi_lam for the builtin families.

    Drifted BM (parameter c):  psi_lam = e^{cx} sinh(g x) / g with
    g = sqrt(c^2 + 2 lam) for lam > -c^2/2 and x e^{cx} at lam = -c^2/2.
    OU (parameter c): psi_lam = x M(lam/(2c) + 1/2, 3/2, c x^2), evaluated
    by the Kummer series and its large-argument expansion.
    """
    lam = float(lam)
    if spec.family == "bm_drift":
        (c,) = spec.params
        lam0 = c * c / 2.0
        if lam < -lam0 - 1e-14:
            raise RangeError(f"lambda={lam} below -lambda0={-lam0} for {spec.label}")
        g2 = max(c * c + 2.0 * lam, 0.0)
        g = math.sqrt(g2)

        if g == 0.0:
            value = lambda x: np.asarray(x, dtype=float) * np.exp(c * np.asarray(x, dtype=float))
            dscale = lambda x: (1.0 + c * np.asarray(x, dtype=float)) * np.exp(-c * np.asarray(x, dtype=float))
            logv = lambda x: np.log(np.asarray(x, dtype=float)) + c * np.asarray(x, dtype=float)
            dlogv = lambda x: 1.0 / np.asarray(x, dtype=float) + c
        else:
            def value(x, c=c, g=g):
                x = np.asarray(x, dtype=float)
                with np.errstate(over="ignore"):
                    return np.exp(c * x) * np.sinh(g * x) / g

            def dscale(x, c=c, g=g):
                # e^{-2cx} psi'(x) = e^{-cx} (c sinh(gx)/g + cosh(gx))
                x = np.asarray(x, dtype=float)
                return np.exp(-c * x) * (c * np.sinh(g * x) / g + np.cosh(g * x))

            def logv(x, c=c, g=g):
                x = np.asarray(x, dtype=float)
                out = np.empty_like(x)
                pos = x > 0
                out[~pos] = -math.inf
                out[pos] = c * x[pos] + _log_sinh(g * x[pos]) - math.log(g)
                return out

            def dlogv(x, c=c, g=g):
                x = np.asarray(x, dtype=float)
                return c + g / np.tanh(g * x)

    elif spec.family == "ou":
        (c,) = spec.params
        lam0 = c
        if lam < -lam0 - 1e-14:
            raise RangeError(f"lambda={lam} below -lambda0={-lam0} for {spec.label}")
        a = lam / (2.0 * c) + 0.5
        if abs(a) < 1e-15:
            value = lambda x: np.asarray(x, dtype=float)
            dscale = lambda x: np.exp(-c * np.asarray(x, dtype=float) ** 2)
            logv = lambda x: np.log(np.asarray(x, dtype=float))
            dlogv = lambda x: 1.0 / np.asarray(x, dtype=float)
        else:
            def value(x, a=a, c=c):
                x = np.asarray(x, dtype=float)
                return x * _kummer_m(a, 1.5, c * x * x)

            def dscale(x, a=a, c=c):
                # psi' = M(a,3/2,z) + (4/3) a c x^2 M(a+1,5/2,z), z = c x^2
                x = np.asarray(x, dtype=float)
                z = c * x * x
                psip = _kummer_m(a, 1.5, z) + (4.0 / 3.0) * a * z * _kummer_m(a + 1.0, 2.5, z)
                return psip * np.exp(-z)

            def logv(x, a=a, c=c):
                x = np.asarray(x, dtype=float)
                out = np.empty_like(x)
                pos = x > 0
                out[~pos] = -math.inf
                out[pos] = np.log(x[pos]) + _kummer_log_m(a, 1.5, c * x[pos] ** 2)
                return out

            def dlogv(x, a=a, c=c):
                x = np.asarray(x, dtype=float)
                z = c * x * x
                ratio = np.exp(_kummer_log_m(a + 1.0, 2.5, z) - _kummer_log_m(a, 1.5, z))
                return 1.0 / x + 2.0 * c * x * (a / 1.5) * ratio

    else:
        raise PreconditionError(f"no closed-form eigenfunction for spec {spec.label!r}")

    grid = np.linspace(0.0, min(L_max, 20.0), 2001)
    return EigenFn(
        lam=lam, L_max=float(L_max), source="closed_form", grid=grid, spec=spec,
        _value=value, _deriv_scale=dscale, _log_value=logv, _dlog_value=dlogv,
    )


def analytic_lambda0(spec: DiffusionSpec) -> Optional[float]:
    """Known spectral bottom of the builtin families, None otherwise."""
    if spec.family == "bm_drift":
        return spec.params[0] ** 2 / 2.0
    if spec.family == "ou":
        return float(spec.params[0])
    return None


def best_psi(spec: DiffusionSpec, lam: float, L_max: float = 20.0, n_grid: int = 20000) -> EigenFn:
    """Closed form when the spec is a builtin, otherwise the RK4 solver."""
    if spec.family in ("bm_drift", "ou"):
        return closed_form_psi(spec, lam)
    return solve_psi(spec, lam, L_max=L_max, n_grid=n_grid)


@dataclasses.dataclass(frozen=True)
class Lambda0Estimate:
    """Bisection estimate of the spectral bottom with its bracket."""

    value: float
    bracket: tuple
    L_max: float

    def __post_init__(self):
        lo, hi = self.bracket
        if not (lo < self.value <= hi):
            raise ValueError("bracket must contain the value")


class _PositivityScanner:
    """Positivity predicate for psi_{-lam} at a fixed horizon L."""

    def __init__(self, spec: DiffusionSpec, L: float, lam_cap: float = 256.0, h_cap: float = 0.005):
        self.spec = spec
        self.L = float(L)
        xs_probe = np.linspace(0.0, L, 4097)
        if spec.sde is not None:
            sig2 = np.asarray(spec.sde.sig(xs_probe), dtype=float) ** 2
            rate = float(np.max(np.abs(2.0 * np.asarray(spec.sde.b(xs_probe), dtype=float) / sig2)))
            rate += math.sqrt(2.0 * float(np.max(1.0 / sig2)) * lam_cap)
        else:
            prod = np.asarray(spec.scale.deriv(xs_probe), dtype=float) * np.asarray(spec.speed(xs_probe), dtype=float)
            if not np.all(np.isfinite(prod)):
                raise EvaluationError("scale/speed coefficients overflow on the scan range; provide an SDE form")
            rate = math.sqrt(float(np.max(prod)) * lam_cap)
        h = min(h_cap, 0.5 / max(rate, 1e-12))
        self.n = int(math.ceil(L / h))
        if self.n > 50_000_000:
            raise EvaluationError("spectral scan grid too fine; provide an SDE form or reduce L_max")
        self.h = L / self.n
        xs_half = np.linspace(0.0, L, 2 * self.n + 1)
        if spec.sde is not None:
            sig2 = np.asarray(spec.sde.sig(xs_half), dtype=float) ** 2
            self.args = (2.0 / sig2, -2.0 * np.asarray(spec.sde.b(xs_half), dtype=float) / sig2)
            self.scan = _kernels.rk4_sde_scan
            self.ic = (0.0, float(spec.scale.deriv(np.array([0.0]))[0]))
        else:
            self.args = (
                np.asarray(spec.scale.deriv(xs_half), dtype=float),
                np.asarray(spec.speed(xs_half), dtype=float),
            )
            self.scan = _kernels.rk4_scale_scan
            self.ic = (0.0, 1.0)

    def positive(self, lam: float) -> bool:
        """True when psi_{-lam} stays strictly positive on (0, L]."""
        status = self.scan(self.args[0], self.args[1], -float(lam), self.h, self.ic[0], self.ic[1])
        if status == -2:
            raise EvaluationError(f"eigen scan broke down at lambda={lam}, L={self.L}")
        return status == -1


def _bisect_lambda0(spec: DiffusionSpec, L: float, width: float, search_hi: float) -> tuple:
    scanner = _PositivityScanner(spec, L)
    hi = 0.25
    for _ in range(64):
        if not scanner.positive(hi):
            break
        hi *= 2.0
        if hi > search_hi:
            raise RangeError(
                f"psi_{{-lam}} positive up to lambda={hi / 2}; enlarge the search bound or L_max"
            )
    lo = 0.0
    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        if scanner.positive(mid):
            lo = mid
        else:
            hi = mid
    return lo, hi


def estimate_lambda0(
    spec: DiffusionSpec,
    tol: float = 1e-4,
    L_max: Optional[float] = None,
    search_hi: float = 1e6,
) -> Lambda0Estimate:
    """Bracket the spectral bottom by bisection on eigenfunction positivity.

    psi_{-lam} is positive on (0, inf) exactly for lam <= lambda0; at a
    finite horizon L the first zero of a super-critical eigenfunction may
    fall beyond L, which biases the raw bisection threshold upward by
    O(1/L^2).  The horizon is therefore doubled until two consecutive
    brackets agree to tol/2, and the leftover bias is removed by Richardson
    extrapolation in 1/L^2 before the final bracket of width tol is issued.
    """
    if tol <= 0:
        raise PreconditionError("tol must be positive")
    nat, _, _ = to_natural_scale(spec)
    check = lambda0_positivity_check(nat)
    if not check.holds:
        raise PreconditionError(
            f"spectral positivity criterion fails for {spec.label}: "
            f"m(1,inf) {check.m_tail.status}, sup x*m(x,inf) = {check.sup_x_tail:.3g}"
        )
    L = float(L_max) if L_max is not None else 20.0
    lo1, hi1 = _bisect_lambda0(spec, L, tol / 4.0, search_hi)
    for _ in range(8):
        lo2, hi2 = _bisect_lambda0(spec, 2.0 * L, tol / 4.0, search_hi)
        c1 = 0.5 * (lo1 + hi1)
        c2 = 0.5 * (lo2 + hi2)
        drift = c1 - c2
        if abs(drift) <= tol / 2.0:
            center = c2 - drift / 3.0
            return Lambda0Estimate(value=center, bracket=(center - tol / 2.0, center + tol / 2.0), L_max=2.0 * L)
        L *= 2.0
        lo1, hi1 = lo2, hi2
    raise EvaluationError(f"lambda0 bisection did not stabilise in L for {spec.label}")


def laplace_T0(spec: DiffusionSpec, beta: float, x: float, psi: Optional[EigenFn] = None) -> float:
    """E_x[e^{-beta T0}] via the representation psi_beta(x) int_x^inf ds / psi_beta^2.

    Valid for beta > -lambda0; for beta in (-lambda0, 0) the value is the
    exponential moment E_x[e^{|beta| T0}] >= 1.
    """
    if x <= 0:
        raise PreconditionError("x must be positive (the limit at 0 is 1)")
    lam0 = analytic_lambda0(spec)
    if lam0 is not None and beta <= -lam0:
        raise RangeError(f"beta={beta} not above -lambda0={-lam0}")
    eig = psi if psi is not None else best_psi(spec, beta)

    if eig.source == "solver":
        val = _tail_integral_solver(spec, eig, x)
    else:
        integrand = lambda y: np.asarray(spec.scale.deriv(y), dtype=float) / eig.value(y) ** 2
        out = improper_integral(integrand, x)
        if not out.is_finite:
            if beta >= 0:
                raise EvaluationError("tail integral for beta >= 0 diverged; eigenfunction is wrong")
            raise RangeError(f"tail integral diverges at beta={beta}; beta is at or below -lambda0")
        val = float(out.value)
    g = float(eig.value(np.asarray([x]))[0]) * val
    if beta >= 0 and not (0.0 < g <= 1.0 + 1e-6):
        raise EvaluationError(f"laplace_T0 produced {g} outside (0, 1] for beta={beta}")
    return g


def _tail_integral_solver(spec: DiffusionSpec, eig: EigenFn, x: float) -> float:
    """int_x^inf ds/psi^2 from gridded psi with log-linear tail extrapolation."""
    grid = eig.grid[eig.grid >= x]
    if grid.size < 10:
        raise RangeError("x too close to L_max for the solver tail integral")
    xs = np.concatenate([[x], grid]) if grid[0] > x else grid
    f = np.asarray(spec.scale.deriv(xs), dtype=float) / eig.value(xs) ** 2
    body = float(np.trapezoid(f, xs))
    # fit the decay rate on the last decade of the grid
    k = max(int(0.1 * xs.size), 10)
    tail_x = xs[-k:]
    tail_f = f[-k:]
    if np.any(tail_f <= 0):
        raise EvaluationError("tail integrand vanished; cannot extrapolate")
    slope = np.polyfit(tail_x, np.log(tail_f), 1)[0]
    if slope >= -1e-12:
        raise EvaluationError("tail integrand is not decaying on the grid; enlarge L_max")
    tail = tail_f[-1] / (-slope)
    return body + tail


def laplace_hit_htransform(spec: DiffusionSpec, lam: float, beta: float, x: float, y: float) -> float:
    """E_x^[psi_{-lam}] [e^{-beta T_y}] for 0 <= x <= y via the eigen ratio.

    Equals (psi_{beta-lam}(x)/psi_{-lam}(x)) * (psi_{-lam}(y)/psi_{beta-lam}(y));
    at x = 0 the first factor is 1 in the limit.
    """
    if beta < 0:
        raise PreconditionError("beta must be >= 0")
    if not (0 <= x <= y):
        raise PreconditionError(f"need 0 <= x <= y, got x={x}, y={y}")
    lam0 = analytic_lambda0(spec)
    if lam0 is not None:
        if not (0 < lam <= lam0 + 1e-12):
            raise RangeError(f"lambda={lam} outside (0, lambda0={lam0}]")
        if beta - lam < -lam0:
            raise RangeError("beta - lambda below -lambda0")
    if x == y or beta == 0.0:
        return 1.0
    e_num = best_psi(spec, beta - lam)
    e_den = best_psi(spec, -lam)
    log_ratio_y = float(e_den.log_value(np.asarray([y]))[0] - e_num.log_value(np.asarray([y]))[0])
    if x == 0.0:
        return float(np.exp(log_ratio_y))
    log_ratio_x = float(e_num.log_value(np.asarray([x]))[0] - e_den.log_value(np.asarray([x]))[0])
    return float(np.exp(log_ratio_x + log_ratio_y))


@dataclasses.dataclass(frozen=True)
class QsdDensity:
    """Quasi-stationary density lam * psi_{-lam} dm with its mass check."""

    spec: DiffusionSpec
    lam: float
    psi: EigenFn
    mass: float

    def density(self, x):
        """Density with respect to Lebesgue measure."""
        x = np.asarray(x, dtype=float)
        return self.lam * self.psi.value(x) * np.asarray(self.spec.speed(x), dtype=float)

    def density_dm(self, x):
        """Density with respect to the speed measure dm."""
        return self.lam * self.psi.value(np.asarray(x, dtype=float))


def qsd_density(spec: DiffusionSpec, lam: float, mass_tol: float = 1e-4) -> QsdDensity:
    """Quasi-stationary density for lam in (0, lambda0], checked to unit mass."""
    lam0 = analytic_lambda0(spec)
    if lam <= 0:
        raise RangeError("lambda must be positive")
    if lam0 is not None and lam > lam0 + 1e-12:
        raise RangeError(f"lambda={lam} above lambda0={lam0}")
    psi = best_psi(spec, -lam)
    dens = lambda x: lam * psi.value(np.asarray(x, dtype=float)) * np.asarray(spec.speed(x), dtype=float)
    fn = lambda x: float(dens(np.asarray([x]))[0])
    head, _ = integrate.quad(fn, 0.0, 1.0, epsrel=1e-10, limit=200)
    tail = improper_integral(dens, 1.0).require_finite("QSD normalisation integral")
    mass = head + tail
    if abs(mass - 1.0) > mass_tol:
        raise EvaluationError(f"QSD mass {mass} deviates from 1 beyond {mass_tol}; eigen solve inaccurate")
    return QsdDensity(spec=spec, lam=float(lam), psi=psi, mass=float(mass))
