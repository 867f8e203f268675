"""Diffusion specifications on [0, inf) and Feller boundary classification.

A diffusion is specified by a scale function s and a speed measure m (the
generator is d/dm d+/ds), optionally together with an SDE form
dX = b dt + sigma dB and a killing rate.  Two builtin families cover the
worked examples: Brownian motion with constant negative drift and the
Ornstein-Uhlenbeck process, both with closed-form scale/speed data.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Optional

import numpy as np
from scipy import special

from .measures import (
    DEFAULT_POLICY,
    DIVERGENT,
    FINITE,
    DivergencePolicy,
    EvaluationError,
    IntegralOutcome,
    Measure1D,
    PreconditionError,
    ScaleFn,
    improper_integral,
    improper_integral_to_zero,
    scale_from_derivative,
)


class ParameterError(ValueError):
    """A constructor parameter is outside its allowed range."""


@dataclasses.dataclass(frozen=True)
class SdeForm:
    """Coefficients of dX = drift(X) dt + sigma(X) dB."""

    drift: Callable
    sigma: Callable

    def b(self, x):
        return self.drift(np.asarray(x, dtype=float))

    def sig(self, x):
        return self.sigma(np.asarray(x, dtype=float))


@dataclasses.dataclass(frozen=True)
class DiffusionSpec:
    """Scale + speed (+ optional SDE form and killing rate) on [0, inf).

    ``family``/``params`` mark builtin examples so closed-form
    eigenfunctions can be dispatched; general specs leave them empty.
    """

    scale: ScaleFn
    speed: Measure1D
    sde: Optional[SdeForm] = None
    killing: Optional[Callable] = None
    label: str = ""
    family: Optional[str] = None
    params: tuple = ()

    def is_natural_scale(self, tol: float = 1e-9) -> bool:
        xs = np.array([0.5, 1.0, 2.0])
        return bool(np.all(np.abs(self.scale(xs) - xs) <= tol * (1 + xs)))


@dataclasses.dataclass(frozen=True)
class BoundaryClass:
    """Feller type of a boundary with the two deciding integrals."""

    kind: str
    I: IntegralOutcome
    J: IntegralOutcome

    @staticmethod
    def from_outcomes(I: IntegralOutcome, J: IntegralOutcome) -> "BoundaryClass":
        table = {
            (True, True): "regular",
            (False, True): "exit",
            (True, False): "entrance",
            (False, False): "natural",
        }
        return BoundaryClass(table[(I.is_finite, J.is_finite)], I, J)


def make_bm_drift(c: float) -> DiffusionSpec:
    """Brownian motion with constant negative drift -c on [0, inf).

    Generator (1/2) u'' - c u'; speed dm = 2 e^{-2cx} dx, scale
    ds = e^{2cx} dx, so s(x) = (e^{2cx} - 1) / (2c).
    """
    if not (c > 0):
        raise ParameterError(f"drift parameter must be positive, got c={c}")
    c = float(c)
    speed = Measure1D(
        density=lambda x: 2.0 * np.exp(-2.0 * c * np.asarray(x, dtype=float)),
        cumulative=lambda x: -np.expm1(-2.0 * c * np.asarray(x, dtype=float)) / c,
        log_density=lambda x: math.log(2.0) - 2.0 * c * np.asarray(x, dtype=float),
        log_tail=lambda x: -2.0 * c * np.asarray(x, dtype=float) - math.log(c),
        total=1.0 / c,
        label=f"2*exp(-2*{c}*x) dx",
    )
    scale = ScaleFn(
        value=lambda x: np.expm1(2.0 * c * np.asarray(x, dtype=float)) / (2.0 * c),
        derivative=lambda x: np.exp(2.0 * c * np.asarray(x, dtype=float)),
        inverse=lambda y: np.log1p(2.0 * c * np.asarray(y, dtype=float)) / (2.0 * c),
        log_value=lambda x: _log_expm1(2.0 * c * np.asarray(x, dtype=float)) - math.log(2.0 * c),
        log_derivative=lambda x: 2.0 * c * np.asarray(x, dtype=float),
        label=f"(exp(2*{c}*x)-1)/(2*{c})",
    )
    sde = SdeForm(drift=lambda x: np.full_like(np.asarray(x, dtype=float), -c), sigma=lambda x: np.ones_like(np.asarray(x, dtype=float)))
    return DiffusionSpec(scale=scale, speed=speed, sde=sde, label=f"bm_drift({c})", family="bm_drift", params=(c,))


def make_ou(c: float) -> DiffusionSpec:
    """Ornstein-Uhlenbeck process dX = dB - c X dt on [0, inf).

    Speed dm = 2 e^{-c x^2} dx and scale ds = e^{c x^2} dx, with
    s(x) = sqrt(pi/(4c)) erfi(sqrt(c) x).
    """
    if not (c > 0):
        raise ParameterError(f"rate parameter must be positive, got c={c}")
    c = float(c)
    rc = math.sqrt(c)
    pref = math.sqrt(math.pi) / (2.0 * rc)

    def scale_value(x):
        x = np.asarray(x, dtype=float)
        with np.errstate(over="ignore"):
            return pref * special.erfi(rc * x)

    def scale_log_value(x):
        x = np.asarray(x, dtype=float)
        u = rc * x
        small = u < 20.0
        out = np.empty_like(u)
        with np.errstate(divide="ignore", over="ignore"):
            out[small] = np.log(pref * special.erfi(u[small]))
        big = ~small
        # erfi(u) ~ e^{u^2} / (u sqrt(pi)) for large u
        out[big] = u[big] ** 2 - np.log(u[big] * math.sqrt(math.pi)) + math.log(pref)
        return out

    speed = Measure1D(
        density=lambda x: 2.0 * np.exp(-c * np.asarray(x, dtype=float) ** 2),
        cumulative=lambda x: math.sqrt(math.pi / c) * special.erf(rc * np.asarray(x, dtype=float)),
        log_density=lambda x: math.log(2.0) - c * np.asarray(x, dtype=float) ** 2,
        total=math.sqrt(math.pi / c),
        label=f"2*exp(-{c}*x^2) dx",
    )
    scale = ScaleFn(
        value=scale_value,
        derivative=lambda x: np.exp(c * np.asarray(x, dtype=float) ** 2),
        log_value=scale_log_value,
        log_derivative=lambda x: c * np.asarray(x, dtype=float) ** 2,
        label=f"sqrt(pi/(4*{c}))*erfi(sqrt({c})*x)",
    )
    sde = SdeForm(drift=lambda x: -c * np.asarray(x, dtype=float), sigma=lambda x: np.ones_like(np.asarray(x, dtype=float)))
    return DiffusionSpec(scale=scale, speed=speed, sde=sde, label=f"ou({c})", family="ou", params=(c,))


def _log_expm1(u):
    """log(exp(u) - 1), stable for large and small u."""
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    big = u > 30.0
    out[big] = u[big]
    with np.errstate(divide="ignore"):
        out[~big] = np.log(np.expm1(u[~big]))
    return out


def spec_from_densities(
    speed_density: Callable,
    scale_derivative: Callable,
    label: str = "custom",
) -> DiffusionSpec:
    """Spec from raw densities (no SDE form); used by the config front end."""
    speed = Measure1D(density=speed_density, label=f"{label} speed")
    scale = scale_from_derivative(scale_derivative, label=f"{label} scale")
    return DiffusionSpec(scale=scale, speed=speed, label=label)


def sde_consistency(spec: DiffusionSpec, grid: Optional[np.ndarray] = None) -> float:
    """Max relative defect of sigma^2 m' s' = 2 on the check grid.

    Generator matching of (1/2) sigma^2 u'' + b u' with d/dm d+/ds requires
    sigma(x)^2 m'(x) s'(x) = 2 and s' proportional to exp(-int 2b/sigma^2).
    """
    if spec.sde is None:
        raise PreconditionError("spec has no SDE form")
    xs = np.linspace(0.01, 10.0, 200) if grid is None else np.asarray(grid, dtype=float)
    lhs = spec.sde.sig(xs) ** 2 * spec.speed(xs) * spec.scale.deriv(xs)
    return float(np.max(np.abs(lhs / 2.0 - 1.0)))


def _grid_tail_function(m: Measure1D, c_ref: float, policy: DivergencePolicy):
    """Return (tail_outcome, tail(x) callable valid for x >= c_ref)."""
    tail_total = m.tail_mass(c_ref, policy=policy)
    if not tail_total.is_finite:
        return tail_total, None
    if m.cumulative is not None:
        base = float(m.cumulative(c_ref))
        return tail_total, lambda x: np.maximum(float(tail_total.value) - (m.cumulative(np.asarray(x, dtype=float)) - base), 0.0)
    # cumulative via dense trapezoid over the doubling range, cached lazily
    cache = {"xs": np.array([c_ref]), "cum": np.array([0.0])}

    def tail(x):
        x = np.asarray(x, dtype=float)
        hi = float(np.max(x))
        if hi > cache["xs"][-1]:
            xs_new = np.geomspace(cache["xs"][-1], hi * 1.0000001, 513)
            dens = np.asarray(m.density(xs_new), dtype=float)
            cum_new = cache["cum"][-1] + np.concatenate(
                [[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(xs_new))]
            )
            cache["xs"] = np.concatenate([cache["xs"], xs_new[1:]])
            cache["cum"] = np.concatenate([cache["cum"], cum_new[1:]])
        cum = np.interp(x, cache["xs"], cache["cum"])
        return np.maximum(float(tail_total.value) - cum, 0.0)

    return tail_total, tail


def _feller_toward_infinity(
    outer_log_density: Callable,
    inner_log_density: Callable,
    c_ref: float,
    policy: DivergencePolicy,
    pts_per_chunk: int = 65,
) -> IntegralOutcome:
    """int_c^inf outer'(x) * inner((x, inf)) dx with divergence detection.

    Runs entirely in log space: Feller integrands at a natural boundary are
    products like e^{2cx} * e^{-2cx} whose factors overflow/underflow long
    before the product does.  The inner tail is accumulated backward
    (cancellation-free) on a shared geometric grid.
    """
    K = policy.doublings
    xs = np.geomspace(c_ref, c_ref * 2.0 ** K, K * pts_per_chunk + 1)
    with np.errstate(over="ignore", divide="ignore"):
        la = np.asarray(inner_log_density(xs), dtype=float)
    if np.any(np.isnan(la)):
        raise EvaluationError("inner density produced NaN on the Feller grid")
    dx = np.diff(xs)
    # log of the trapezoid mass of each cell
    seg = np.logaddexp(la[:-1], la[1:]) + np.log(0.5 * dx)

    # verdict on the inner measure's own tail m((c, inf))
    log_thr = math.log(policy.threshold)
    chunk_ends = np.arange(1, K + 1) * pts_per_chunk
    inner_partials = []
    running = -math.inf
    stable = 0
    inner_finite = False
    for k, end in enumerate(chunk_ends):
        start = k * pts_per_chunk
        lchunk = _logsumexp(seg[start:end])
        running = np.logaddexp(running, lchunk)
        inner_partials.append(running)
        if running > log_thr:
            return IntegralOutcome(DIVERGENT, evidence=tuple(np.exp(np.minimum(inner_partials, 700.0))), log_scale=False)
        rel = math.exp(min(lchunk - running, 0.0)) if running > -math.inf else 0.0
        if running > -math.inf and rel <= policy.rtol:
            stable += 1
            if stable >= 2 and k >= 2:
                inner_finite = True
        else:
            stable = 0
    if not inner_finite and running > -math.inf:
        return IntegralOutcome(DIVERGENT, evidence=tuple(np.exp(np.minimum(inner_partials, 700.0))))

    # backward (cancellation-free) log tail of the inner measure at grid nodes
    log_tail = np.full(xs.shape[0], -math.inf)
    acc = -math.inf
    # geometric residual beyond the last node
    if seg.size >= 2 and seg[-1] > -math.inf and seg[-1] < seg[-2]:
        q = math.exp(seg[-1] - seg[-2])
        acc = seg[-1] + math.log(q / (1.0 - q)) if 0.0 < q < 1.0 else -math.inf
    for j in range(xs.shape[0] - 2, -1, -1):
        acc = np.logaddexp(acc, seg[j])
        log_tail[j] = acc
    log_tail[-1] = log_tail[-2]  # harmless endpoint fill

    with np.errstate(over="ignore", divide="ignore"):
        lb = np.asarray(outer_log_density(xs), dtype=float)
    if np.any(np.isnan(lb)):
        raise EvaluationError("outer density produced NaN on the Feller grid")
    lf = lb + log_tail
    lf[np.isnan(lf)] = -math.inf  # 0 * inf cells are genuinely negligible here

    partials = []
    total = -math.inf
    stable = 0
    for k in range(K):
        start, end = k * pts_per_chunk, (k + 1) * pts_per_chunk
        cell = np.logaddexp(lf[start:end], lf[start + 1 : end + 1]) + np.log(0.5 * dx[start:end])
        lchunk = _logsumexp(cell)
        total = np.logaddexp(total, lchunk)
        partials.append(math.exp(min(total, 700.0)))
        if total > log_thr:
            return IntegralOutcome(DIVERGENT, evidence=tuple(partials))
        rel = math.exp(min(lchunk - total, 0.0)) if total > -math.inf else 0.0
        if total > -math.inf and rel <= policy.rtol:
            stable += 1
            if stable >= 2:
                return IntegralOutcome(FINITE, value=math.exp(total), evidence=tuple(partials), error=policy.rtol * math.exp(total))
        else:
            stable = 0
    if total == -math.inf:
        return IntegralOutcome(FINITE, value=0.0, evidence=tuple(partials))
    return IntegralOutcome(DIVERGENT, evidence=tuple(partials))


def _logsumexp(v: np.ndarray) -> float:
    m = float(np.max(v)) if v.size else -math.inf
    if not math.isfinite(m):
        return m
    return m + math.log(float(np.sum(np.exp(v - m))))


def _feller_toward_zero(outer_density: Callable, inner_measure: Measure1D, c_ref: float, policy: DivergencePolicy) -> IntegralOutcome:
    """int_0^c outer'(x) * inner((0, x)) dx with divergence detection at 0."""
    head = improper_integral_to_zero(inner_measure.density, c_ref, policy=policy)
    if not head.is_finite:
        return IntegralOutcome(DIVERGENT, evidence=tuple(head.evidence))
    if inner_measure.cumulative is not None:
        inner_from_zero = lambda x: np.asarray(inner_measure.cumulative(np.asarray(x, dtype=float)), dtype=float)
    else:
        total = float(head.value)
        cache = {"xs": np.array([c_ref]), "below": np.array([total])}

        def inner_from_zero(x):
            x = np.asarray(x, dtype=float)
            lo = float(np.min(x))
            if lo < cache["xs"][0]:
                xs_new = np.geomspace(max(lo * 0.999999, 1e-300), cache["xs"][0], 513)
                dens = np.asarray(inner_measure.density(xs_new), dtype=float)
                seg = 0.5 * (dens[1:] + dens[:-1]) * np.diff(xs_new)
                below_new = cache["below"][0] - np.concatenate([[0.0], np.cumsum(seg[::-1])])[::-1]
                cache["xs"] = np.concatenate([xs_new[:-1], cache["xs"]])
                cache["below"] = np.concatenate([np.maximum(below_new[:-1], 0.0), cache["below"]])
            return np.interp(x, cache["xs"], cache["below"])

    integrand = lambda x: np.asarray(outer_density(x), dtype=float) * np.asarray(inner_from_zero(x), dtype=float)
    return improper_integral_to_zero(integrand, c_ref, policy=policy)


def classify_boundary(
    spec: DiffusionSpec,
    which,
    c_ref: float = 1.0,
    policy: DivergencePolicy = DEFAULT_POLICY,
) -> BoundaryClass:
    """Feller class of the boundary 0 or inf.

    ``which`` is 0 or math.inf (the strings "0"/"inf" are accepted).  The two
    deciding integrals I and J are nested integrals of ds against the speed
    tail and of dm against the scale tail; each is evaluated with divergence
    detection and reported as evidence.
    """
    which = {"0": 0.0, "inf": math.inf}.get(which, which)
    if which not in (0, 0.0, math.inf):
        raise PreconditionError(f"boundary must be 0 or inf, got {which!r}")
    if c_ref <= 0:
        raise PreconditionError("c_ref must be interior (positive)")
    sprime = lambda x: spec.scale.deriv(x)
    scale_measure = Measure1D(density=sprime, label="ds")
    if which == math.inf:
        log_s = lambda x: spec.scale.logd(x)
        log_m = lambda x: spec.speed.logd(x)
        I = _feller_toward_infinity(log_s, log_m, c_ref, policy)
        J = _feller_toward_infinity(log_m, log_s, c_ref, policy)
    else:
        I = _feller_toward_zero(sprime, spec.speed, c_ref, policy)
        J = _feller_toward_zero(spec.speed.density, scale_measure, c_ref, policy)
    return BoundaryClass.from_outcomes(I, J)


def to_natural_scale(spec: DiffusionSpec):
    """Rewrite the spec in the coordinate y = s(x).

    Returns ``(natural_spec, forward, inverse)`` where forward = s and the
    natural spec has identity scale and pushforward speed.  The Feller
    integrals are invariant under this change of coordinates.
    """
    if spec.scale.origin != 0.0:
        raise PreconditionError("natural-scale change expects a scale anchored at 0")
    s = spec.scale
    forward = lambda x: s(np.asarray(x, dtype=float))
    inverse = lambda y: s.inv(y)

    def density(y):
        x = s.inv(np.asarray(y, dtype=float))
        return np.asarray(spec.speed(x), dtype=float) / np.asarray(s.deriv(x), dtype=float)

    cumulative = None
    if spec.speed.cumulative is not None:
        cumulative = lambda y: spec.speed.cumulative(s.inv(np.asarray(y, dtype=float)))
    speed = Measure1D(
        density=density,
        cumulative=cumulative,
        total=spec.speed.total,
        label=f"pushforward of {spec.speed.label}",
    )
    scale = ScaleFn(
        value=lambda y: np.asarray(y, dtype=float),
        derivative=lambda y: np.ones_like(np.asarray(y, dtype=float)),
        inverse=lambda y: np.asarray(y, dtype=float),
        label="identity",
    )
    sde = None
    if spec.sde is not None:
        base = spec.sde

        def nat_sigma(y):
            x = s.inv(np.asarray(y, dtype=float))
            return np.asarray(s.deriv(x), dtype=float) * np.asarray(base.sig(x), dtype=float)

        sde = SdeForm(drift=lambda y: np.zeros_like(np.asarray(y, dtype=float)), sigma=nat_sigma)
    nat = DiffusionSpec(scale=scale, speed=speed, sde=sde, label=f"natural({spec.label})")
    return nat, forward, inverse


@dataclasses.dataclass(frozen=True)
class PositivityCheck:
    """Verdict of the spectral-gap criterion m(1,inf) < inf, sup x m(x,inf) < inf."""

    holds: bool
    m_tail: IntegralOutcome
    sup_x_tail: float
    evidence: tuple


def lambda0_positivity_check(
    spec: DiffusionSpec,
    policy: DivergencePolicy = DEFAULT_POLICY,
    sup_threshold: float = 1e9,
) -> PositivityCheck:
    """Check the natural-scale criterion for a positive spectral bottom.

    Requires a natural-scale spec (run :func:`to_natural_scale` first).  The
    limsup of x m((x, inf)) is proxied by the supremum over the doubling grid
    x = 2^k, k <= policy.doublings, compared against ``sup_threshold``.
    """
    if not spec.is_natural_scale():
        raise PreconditionError("positivity check expects a natural-scale spec")
    m_tail = spec.speed.tail_mass(1.0, policy=policy)
    if not m_tail.is_finite:
        return PositivityCheck(False, m_tail, math.inf, ())
    total = float(m_tail.value)
    xs = 2.0 ** np.arange(0, policy.doublings + 1)
    if spec.speed.cumulative is not None:
        base = float(spec.speed.cumulative(1.0))
        tails = np.maximum(total - (np.asarray(spec.speed.cumulative(xs), dtype=float) - base), 0.0)
    else:
        _, tail_fn = _grid_tail_function(spec.speed, 1.0, policy)
        tails = tail_fn(xs)
    seq = xs * tails
    sup = float(np.max(seq))
    holds = bool(sup < sup_threshold)
    return PositivityCheck(holds, m_tail, sup, tuple(float(v) for v in seq))
