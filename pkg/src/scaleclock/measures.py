"""Densities, scale functions and divergence-detecting improper integrals on (0, inf).

Everything downstream (boundary classification, eigenfunction normalisation,
renewal transforms, tail-triviality tests) reduces to integrals of smooth
densities against Lebesgue measure.  This module provides:

* ``Measure1D``   -- an absolutely continuous measure given by its density,
  with optional closed-form cumulative and log-density.
* ``ScaleFn``     -- a strictly increasing coordinate with its derivative and
  optional closed forms (inverse, log value / log derivative).
* ``mass``        -- adaptive quadrature of a measure over an interval.
* ``improper_integral`` and friends -- partial integrals over a doubling (or
  halving) schedule with an explicit finite/divergent verdict, also in log
  space for integrands whose linear values overflow a float.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Optional

import numpy as np
from scipy import integrate


class EvaluationError(ValueError):
    """A density or integrand evaluated to a non-finite or invalid value."""


class PreconditionError(ValueError):
    """An operation was called outside its stated domain."""


FINITE = "finite"
DIVERGENT = "divergent"


@dataclasses.dataclass(frozen=True)
class DivergencePolicy:
    """How partial integrals are judged finite or divergent.

    ``threshold`` is the value past which a partial integral counts as
    infinite; ``doublings`` is the length of the geometric schedule;
    ``rtol`` is the stabilisation tolerance between successive partials.
    A schedule that neither crosses the threshold nor stabilises is
    reported divergent (slow divergence and non-convergence are not
    distinguished).
    """

    threshold: float = 1e12
    doublings: int = 40
    rtol: float = 1e-6


DEFAULT_POLICY = DivergencePolicy()


@dataclasses.dataclass(frozen=True)
class IntegralOutcome:
    """Result of an improper integral: a verdict plus evidence.

    ``value`` is present only for finite outcomes.  ``evidence`` holds the
    partial integrals over the schedule, so a divergent verdict can be
    audited.  For log-space outcomes ``value`` is the logarithm of the
    integral and ``log_scale`` is True.
    """

    status: str
    value: Optional[float] = None
    evidence: tuple = ()
    error: float = 0.0
    log_scale: bool = False

    @property
    def is_finite(self) -> bool:
        return self.status == FINITE

    def require_finite(self, what: str = "integral") -> float:
        if not self.is_finite:
            raise EvaluationError(f"{what} diverged; partial integrals {self.evidence[-3:]}")
        return float(self.value)


def _as_array_fn(f: Callable) -> Callable:
    """Wrap f so it accepts and returns numpy arrays."""

    def wrapped(x):
        x = np.asarray(x, dtype=float)
        out = f(x)
        return np.broadcast_to(np.asarray(out, dtype=float), x.shape).copy() if np.ndim(out) != np.ndim(x) else np.asarray(out, dtype=float)

    return wrapped


def _check_nonneg_finite(f: Callable, xs: np.ndarray, what: str) -> np.ndarray:
    vals = np.asarray(f(xs), dtype=float)
    bad = ~np.isfinite(vals)
    if np.any(bad):
        # Overflow of a non-negative integrand reads as +inf, which the
        # divergence machinery handles; reject NaN and -inf outright.
        nan_bad = np.isnan(vals) | (vals == -np.inf)
        if np.any(nan_bad):
            x_bad = float(np.asarray(xs)[nan_bad][0])
            raise EvaluationError(f"{what} evaluated to a non-finite value at x={x_bad!r}")
    if np.any(vals < 0):
        x_bad = float(np.asarray(xs)[vals < 0][0])
        raise PreconditionError(f"{what} is negative at x={x_bad!r}")
    return vals


@dataclasses.dataclass(frozen=True)
class Measure1D:
    """Absolutely continuous measure on (0, inf) given by its density.

    ``cumulative`` (mass of (0, x]), ``log_density`` and ``log_tail``
    (log of m((x, inf))) are optional closed forms; when present they are
    used instead of quadrature.  ``total`` is the total mass when known in
    closed form (may be inf).
    """

    density: Callable
    cumulative: Optional[Callable] = None
    log_density: Optional[Callable] = None
    log_tail: Optional[Callable] = None
    total: Optional[float] = None
    label: str = ""

    def __call__(self, x):
        return self.density(np.asarray(x, dtype=float))

    def logd(self, x):
        if self.log_density is not None:
            return self.log_density(np.asarray(x, dtype=float))
        with np.errstate(divide="ignore"):
            return np.log(self.density(np.asarray(x, dtype=float)))

    def mass(self, a: float, b: float, rtol: float = 1e-9) -> float:
        return mass(self, a, b, rtol=rtol)

    def tail_mass(self, a: float, policy: DivergencePolicy = DEFAULT_POLICY) -> IntegralOutcome:
        """m((a, inf)) with divergence detection."""
        if self.cumulative is not None and self.total is not None:
            if not math.isfinite(self.total):
                return IntegralOutcome(DIVERGENT, evidence=(math.inf,))
            val = float(self.total - self.cumulative(a))
            return IntegralOutcome(FINITE, value=max(val, 0.0), error=1e-15 * abs(self.total))
        return improper_integral(self.density, a, policy=policy)


def mass(m: Measure1D, a: float, b: float, rtol: float = 1e-9) -> float:
    """Mass of the interval (a, b) under m.

    ``a`` may be 0 (read as the limit from the right) and ``b`` may be inf;
    an infinite-mass request raises, since the return type is a plain float.
    """
    if not (0 <= a <= b):
        raise PreconditionError(f"need 0 <= a <= b, got a={a}, b={b}")
    if a == b:
        return 0.0
    if m.cumulative is not None:
        hi = float(m.total) if b == math.inf else float(m.cumulative(b))
        if b == math.inf and m.total is None:
            return m.tail_mass(max(a, 0.0)).require_finite("tail mass") if a > 0 else _quad_mass(m, a, b, rtol)
        lo = 0.0 if a == 0 else float(m.cumulative(a))
        if not math.isfinite(hi - lo):
            raise EvaluationError(f"mass({a}, {b}) is not finite")
        return max(hi - lo, 0.0)
    return _quad_mass(m, a, b, rtol)


def _quad_mass(m: Measure1D, a: float, b: float, rtol: float) -> float:
    fn = lambda x: float(np.asarray(m.density(np.asarray([x], dtype=float)))[0])
    probe = np.geomspace(max(a, 1e-12), b if b != math.inf else max(2 * max(a, 1.0), 1.0), 13)
    _check_nonneg_finite(lambda xs: np.asarray(m.density(xs), dtype=float), probe, m.label or "density")
    if b == math.inf:
        anchor = max(a, 1.0)
        head = 0.0
        if a < anchor:
            head, _ = integrate.quad(fn, a, anchor, epsrel=rtol, limit=200)
        tail = improper_integral(m.density, anchor, policy=DEFAULT_POLICY)
        return head + tail.require_finite("tail mass")
    val, _err = integrate.quad(fn, a, b, epsrel=rtol, limit=200)
    return max(val, 0.0)


def _chunk_integral(f: Callable, lo: float, hi: float, rtol: float) -> float:
    """Integral of a non-negative f over [lo, hi], tolerant of overflow."""
    fn = lambda x: float(np.asarray(f(np.asarray([x], dtype=float)))[0])
    try:
        with np.errstate(over="ignore"):
            val, _ = integrate.quad(fn, lo, hi, epsrel=rtol, limit=200)
    except Exception:
        val = math.inf
    if math.isnan(val):
        val = math.inf
    return val


def improper_integral(
    f: Callable,
    a: float,
    policy: DivergencePolicy = DEFAULT_POLICY,
    rtol: float = 1e-9,
) -> IntegralOutcome:
    """Integral of a non-negative f over [a, inf) with a divergence verdict.

    Partial integrals over [a, a 2^k] are accumulated chunk by chunk.  The
    outcome is finite once two successive doublings agree to ``policy.rtol``
    (a geometric tail estimate is then added and reported in ``error``);
    it is divergent when a partial exceeds ``policy.threshold`` or the
    schedule is exhausted without stabilising.
    """
    if a <= 0:
        raise PreconditionError(f"need a > 0, got {a}")
    fv = _as_array_fn(f)
    probe = np.geomspace(a, a * 4.0, 9)
    _check_nonneg_finite(fv, probe, "integrand")

    partials = []
    total = 0.0
    prev_chunk = None
    stable = 0
    for k in range(1, policy.doublings + 1):
        lo, hi = a * 2.0 ** (k - 1), a * 2.0 ** k
        chunk = _chunk_integral(fv, lo, hi, rtol)
        total += chunk
        partials.append(total)
        if not math.isfinite(total) or total > policy.threshold:
            return IntegralOutcome(DIVERGENT, evidence=tuple(partials))
        if total > 0 and chunk <= policy.rtol * total:
            stable += 1
            if stable >= 2:
                tail = 0.0
                if prev_chunk is not None and prev_chunk > 0 and 0 < chunk < prev_chunk:
                    q = chunk / prev_chunk
                    tail = chunk * q / (1.0 - q)
                return IntegralOutcome(
                    FINITE,
                    value=total + tail,
                    evidence=tuple(partials),
                    error=max(tail, policy.rtol * total),
                )
        else:
            stable = 0
        prev_chunk = chunk
    if total == 0.0:
        return IntegralOutcome(FINITE, value=0.0, evidence=tuple(partials))
    return IntegralOutcome(DIVERGENT, evidence=tuple(partials))


def improper_integral_to_zero(
    f: Callable,
    b: float,
    policy: DivergencePolicy = DEFAULT_POLICY,
    rtol: float = 1e-9,
) -> IntegralOutcome:
    """Integral of a non-negative f over (0, b] with a divergence verdict.

    Mirror image of :func:`improper_integral`: the schedule halves the lower
    endpoint, detecting divergence at the boundary 0.
    """
    if b <= 0:
        raise PreconditionError(f"need b > 0, got {b}")
    fv = _as_array_fn(f)
    probe = np.geomspace(b / 4.0, b, 9)
    _check_nonneg_finite(fv, probe, "integrand")

    partials = []
    total = 0.0
    prev_chunk = None
    stable = 0
    for k in range(1, policy.doublings + 1):
        lo, hi = b * 2.0 ** (-k), b * 2.0 ** (-(k - 1))
        chunk = _chunk_integral(fv, lo, hi, rtol)
        total += chunk
        partials.append(total)
        if not math.isfinite(total) or total > policy.threshold:
            return IntegralOutcome(DIVERGENT, evidence=tuple(partials))
        if total > 0 and chunk <= policy.rtol * total:
            stable += 1
            if stable >= 2:
                tail = 0.0
                if prev_chunk is not None and prev_chunk > 0 and 0 < chunk < prev_chunk:
                    q = chunk / prev_chunk
                    tail = chunk * q / (1.0 - q)
                return IntegralOutcome(
                    FINITE, value=total + tail, evidence=tuple(partials),
                    error=max(tail, policy.rtol * total),
                )
        else:
            stable = 0
        prev_chunk = chunk
    if total == 0.0:
        return IntegralOutcome(FINITE, value=0.0, evidence=tuple(partials))
    return IntegralOutcome(DIVERGENT, evidence=tuple(partials))


def _log_chunk_integral(log_f: Callable, lo: float, hi: float, n: int = 257) -> float:
    """log of the integral of exp(log_f) over [lo, hi] by shifted trapezoid."""
    xs = np.geomspace(lo, hi, n) if lo > 0 else np.linspace(lo, hi, n)
    with np.errstate(over="ignore", invalid="ignore"):
        lf = np.asarray(log_f(xs), dtype=float)
    if np.any(np.isnan(lf)):
        raise EvaluationError(f"log-integrand is NaN in [{lo}, {hi}]")
    m = np.max(lf)
    if m == -math.inf:
        return -math.inf
    if m == math.inf:
        return math.inf
    w = np.exp(lf - m)
    val = np.trapezoid(w, xs)
    return m + math.log(val) if val > 0 else -math.inf


def improper_integral_log(
    log_f: Callable,
    a: float,
    policy: DivergencePolicy = DEFAULT_POLICY,
) -> IntegralOutcome:
    """Log-space version of :func:`improper_integral`.

    ``log_f`` returns the log of a non-negative integrand (``-inf`` where it
    vanishes).  The returned outcome carries ``value = log(integral)`` and
    ``log_scale=True``.  This is the route for integrands built from
    quantities like exp(c x^2) whose linear values overflow.
    """
    if a <= 0:
        raise PreconditionError(f"need a > 0, got {a}")
    log_threshold = math.log(policy.threshold)
    log_partials = []
    log_total = -math.inf
    prev_chunk = None
    stable = 0
    for k in range(1, policy.doublings + 1):
        lo, hi = a * 2.0 ** (k - 1), a * 2.0 ** k
        lchunk = _log_chunk_integral(log_f, lo, hi)
        log_total = np.logaddexp(log_total, lchunk)
        log_partials.append(log_total)
        if log_total == math.inf or log_total > log_threshold:
            return IntegralOutcome(DIVERGENT, evidence=tuple(log_partials), log_scale=True)
        rel_chunk = math.exp(min(lchunk - log_total, 0.0)) if log_total > -math.inf else 0.0
        if log_total > -math.inf and rel_chunk <= policy.rtol:
            stable += 1
            if stable >= 2:
                return IntegralOutcome(
                    FINITE, value=float(log_total), evidence=tuple(log_partials),
                    error=policy.rtol, log_scale=True,
                )
        else:
            stable = 0
        prev_chunk = lchunk
    if log_total == -math.inf:
        return IntegralOutcome(FINITE, value=-math.inf, evidence=(), log_scale=True)
    return IntegralOutcome(DIVERGENT, evidence=tuple(log_partials), log_scale=True)


def log_tail_integral(log_f: Callable, a: float, policy: DivergencePolicy = DEFAULT_POLICY) -> float:
    """log of int_a^inf exp(log_f); +inf when divergent."""
    out = improper_integral_log(log_f, a, policy=policy)
    return float(out.value) if out.is_finite else math.inf


def exp_rule_segments(xs: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Per-interval integrals, exact for exponential integrands.

    On each cell the integrand is fitted as C e^{kx}; this is the natural
    quadrature for the exp-growing/decaying densities handled here and
    degrades gracefully to the trapezoid when the cell is flat or touches
    zero.
    """
    f0, f1 = f[:-1], f[1:]
    dx = np.diff(xs)
    with np.errstate(divide="ignore", invalid="ignore"):
        lr = np.log(f1 / f0)
        seg = np.where(np.abs(lr) > 1e-8, (f1 - f0) / lr, 0.5 * (f0 + f1)) * dx
    trap = 0.5 * (f0 + f1) * dx
    bad = ~np.isfinite(seg) | (f0 <= 0.0) | (f1 <= 0.0)
    return np.where(bad, trap, seg)


def power_rule_log_segments(xs: np.ndarray, lf: np.ndarray) -> np.ndarray:
    """Log of per-interval integrals on a geometric grid, exact for power laws.

    Each cell is fitted as f_j (x/x_j)^gamma in log-log coordinates; the
    returned array holds log of the cell integrals.  Cells touching
    log-density -inf fall back to a trapezoid in the original variable.
    """
    lx = np.log(xs)
    dlx = np.diff(lx)
    lf0, lf1 = lf[:-1], lf[1:]
    ok = np.isfinite(lf0) & np.isfinite(lf1)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        gamma = (lf1 - lf0) / dlx
        gp1 = gamma + 1.0
        factor = np.where(np.abs(gp1) > 1e-8, np.expm1(gp1 * dlx) / gp1, dlx * (1.0 + 0.5 * gp1 * dlx))
        seg = lf0 + lx[:-1] + np.log(factor)
        trap = np.logaddexp(lf0, lf1) + np.log(0.5 * np.diff(xs))
    return np.where(ok, seg, trap)


@dataclasses.dataclass(frozen=True)
class LogTailTable:
    """log of int_x^inf f on a geometric grid, accumulated backward.

    ``divergent`` is set when the far tail fails to decay faster than 1/x,
    in which case the tail values are meaningless.  Evaluation beyond the
    grid continues the final log-log slope (the same power-law model that
    closed the residual).
    """

    xs: np.ndarray
    log_tail: np.ndarray
    log_total: float
    divergent: bool

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        lx = np.log(np.maximum(x, self.xs[0]))
        lxs = np.log(self.xs)
        out = np.interp(lx, lxs, self.log_tail)
        beyond = lx > lxs[-1]
        if np.any(beyond):
            slope = (self.log_tail[-1] - self.log_tail[-8]) / (lxs[-1] - lxs[-8])
            out = np.where(beyond, self.log_tail[-1] + slope * (lx - lxs[-1]), out)
        return out


def log_precision_horizon(log_parts, lo: float, max_doublings: int = 40, budget: float = 4.0e12) -> float:
    """Largest lo * 2^k at which log-space composition still resolves O(1) terms.

    ``log_parts`` are the log factors that get added to form a composite log
    density (log psi, log m', ...).  Their leading terms cancel in the
    composite, but each addition rounds at the ulp of the LARGEST part; once
    that exceeds ~4e12 the float ulp eats order-one structure, so far tables
    must stop there and let power extrapolation take over.
    """
    if callable(log_parts):
        log_parts = [log_parts]
    for k in range(max_doublings, 8, -2):
        x = lo * 2.0 ** k
        mag = 0.0
        bad = False
        for part in log_parts:
            with np.errstate(over="ignore", divide="ignore"):
                v = float(np.asarray(part(np.asarray([x])), dtype=float)[0])
            if math.isnan(v):
                bad = True
                break
            if math.isinf(v):
                # -inf means clean underflow of a factor, which is harmless
                continue
            mag += abs(v)
        if bad or mag >= budget:
            continue
        return x
    return lo * 2.0 ** 8


def log_tail_table(
    log_density: Callable,
    lo: float,
    hi: float,
    points_per_decade: int = 220,
) -> LogTailTable:
    """Tabulate log int_x^inf exp(log_density) for x in [lo, hi].

    The residual beyond ``hi`` is closed by power-law extrapolation of the
    last cell; a non-integrable exponent there marks the table divergent.
    """
    n = max(int(points_per_decade * math.log10(hi / lo)), 64)
    xs = np.geomspace(lo, hi, n)
    with np.errstate(over="ignore", divide="ignore"):
        lf = np.asarray(log_density(xs), dtype=float)
    if np.any(np.isnan(lf)):
        raise EvaluationError("log-density produced NaN on the tail grid")
    seg = power_rule_log_segments(xs, lf)
    # residual from the local exponent, fitted over a window so a single
    # noisy node cannot flip the verdict
    divergent = False
    residual = -math.inf
    if np.isfinite(lf[-1]):
        w = min(12, max(n // 4, 2))
        tail_lf = lf[-w:]
        if np.all(np.isfinite(tail_lf)):
            gamma = float(np.polyfit(np.log(xs[-w:]), tail_lf, 1)[0])
        else:
            gamma = (lf[-1] - lf[-2]) / (math.log(xs[-1]) - math.log(xs[-2]))
        if gamma < -1.001:
            residual = lf[-1] + math.log(xs[-1]) - math.log(-gamma - 1.0)
        else:
            divergent = True
    log_tail = np.empty_like(xs)
    acc = residual
    for j in range(xs.shape[0] - 2, -1, -1):
        acc = np.logaddexp(acc, seg[j])
        log_tail[j] = acc
    log_tail[-1] = residual if residual > -math.inf else log_tail[-2] - 30.0
    return LogTailTable(xs=xs, log_tail=log_tail, log_total=float(log_tail[0]), divergent=divergent)


@dataclasses.dataclass(frozen=True)
class ScaleFn:
    """A strictly increasing coordinate s with s(origin) = 0.

    ``derivative`` is the (right-)derivative s' > 0.  ``inverse``,
    ``log_value`` and ``log_derivative`` are optional closed forms; the
    inverse falls back on bisection.  ``origin`` is 0 for base diffusions;
    h-transformed scales are anchored at an interior point because their
    value diverges at the entrance boundary.
    """

    value: Callable
    derivative: Callable
    origin: float = 0.0
    inverse: Optional[Callable] = None
    log_value: Optional[Callable] = None
    log_derivative: Optional[Callable] = None
    label: str = ""

    def __call__(self, x):
        return self.value(np.asarray(x, dtype=float))

    def deriv(self, x):
        return self.derivative(np.asarray(x, dtype=float))

    def logd(self, x):
        if self.log_derivative is not None:
            return self.log_derivative(np.asarray(x, dtype=float))
        with np.errstate(divide="ignore"):
            return np.log(self.derivative(np.asarray(x, dtype=float)))

    def logv(self, x):
        if self.log_value is not None:
            return self.log_value(np.asarray(x, dtype=float))
        with np.errstate(divide="ignore"):
            return np.log(self.value(np.asarray(x, dtype=float)))

    def inv(self, y):
        """Inverse map; closed form when available, else bisection."""
        y = np.asarray(y, dtype=float)
        if self.inverse is not None:
            return self.inverse(y)
        from scipy.optimize import brentq

        def solve_one(yy: float) -> float:
            if yy == 0.0:
                return self.origin
            lo, hi = self.origin, max(self.origin, 1e-6)
            # value is increasing; bracket by doubling.
            for _ in range(200):
                if float(self.value(np.asarray([hi]))[0]) >= yy:
                    break
                hi = max(2 * hi, hi + 1.0)
            else:
                raise EvaluationError(f"could not bracket scale inverse at y={yy}")
            return brentq(lambda x: float(self.value(np.asarray([x]))[0]) - yy, lo, hi, xtol=1e-12, rtol=1e-14)

        if y.ndim == 0:
            return float(solve_one(float(y)))
        return np.array([solve_one(float(v)) for v in y])


def scale_from_derivative(sprime: Callable, label: str = "") -> ScaleFn:
    """Build a ScaleFn from its derivative by cached cumulative quadrature.

    Used for config-supplied scale densities; builtins carry closed forms.
    """
    fn = lambda x: float(np.asarray(sprime(np.asarray([x], dtype=float)))[0])
    knots = [0.0]
    vals = [0.0]

    def value_one(x: float) -> float:
        if x < 0:
            raise PreconditionError("scale evaluated left of 0")
        # extend knot table so x lies inside
        while knots[-1] < x:
            lo = knots[-1]
            hi = max(2 * lo, lo + 1.0)
            seg, _ = integrate.quad(fn, lo, hi, epsrel=1e-11, limit=200)
            knots.append(hi)
            vals.append(vals[-1] + seg)
        i = int(np.searchsorted(knots, x, side="right")) - 1
        if knots[i] == x:
            return vals[i]
        seg, _ = integrate.quad(fn, knots[i], x, epsrel=1e-11, limit=200)
        return vals[i] + seg

    def value(x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 0:
            return float(value_one(float(x)))
        return np.array([value_one(float(v)) for v in x])

    return ScaleFn(value=value, derivative=_as_array_fn(sprime), label=label)
