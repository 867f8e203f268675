"""Scale-concave functions, wide-sense h-transforms, and the renewal transform.

A function rho belongs to the admissible class when it is generated by a
non-negative, continuous, m-integrable density phi through

    rho(x) = int_0^x ds(y) int_y^infty phi(z) dm(z),      L rho = -phi,

and rho(x) -> infinity.  Such rho are increasing and concave in the scale
coordinate and generalise the eigenfunctions psi_{-lam} (phi = lam psi).
They carry a multiplicative martingale M_t = rho(X_t)/rho(X_0) e^{-A_t}
with A_t = int_0^t (L rho / rho)(X_s) ds, and an h-transform in the wide
sense: speed rho^2 dm, scale rho^{-2} ds, killing rate phi/rho.  The
subclass with bounded killing rate is flagged ``C2``.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .diffusion import DiffusionSpec, SdeForm
from .eigen import EigenFn, RangeError, analytic_lambda0, best_psi, estimate_lambda0
from .measures import (
    DEFAULT_POLICY,
    DivergencePolicy,
    EvaluationError,
    Measure1D,
    PreconditionError,
    ScaleFn,
    improper_integral,
    improper_integral_log,
)


class ClassError(ValueError):
    """The supplied density does not generate an admissible concave function."""


@dataclasses.dataclass(frozen=True)
class ConcaveFn:
    """An admissible scale-concave function with its generating density.

    ``rho_plus`` is the right-derivative with respect to the scale
    coordinate, d rho / ds (non-increasing); ``killing_rate`` is phi/rho,
    the rate of the killing term of the wide-sense h-transform.  ``klass``
    is "C2" when the killing rate is bounded, else "C1".
    """

    spec: DiffusionSpec
    rho: Callable = dataclasses.field(repr=False)
    rho_plus: Callable = dataclasses.field(repr=False)
    phi: Callable = dataclasses.field(repr=False)
    klass: str = "C1"
    c2_bound: Optional[float] = None
    label: str = ""
    _log_rho: Optional[Callable] = dataclasses.field(repr=False, default=None)
    _dlog_rho: Optional[Callable] = dataclasses.field(repr=False, default=None)
    _killing: Optional[Callable] = dataclasses.field(repr=False, default=None)

    def log_rho(self, x):
        x = np.asarray(x, dtype=float)
        if self._log_rho is not None:
            return self._log_rho(x)
        with np.errstate(divide="ignore"):
            return np.log(self.rho(x))

    def dlog_rho(self, x):
        """d/dx log rho (the h-transform drift correction is sigma^2 times this)."""
        x = np.asarray(x, dtype=float)
        if self._dlog_rho is not None:
            return self._dlog_rho(x)
        return self.rho_plus(x) * np.asarray(self.spec.scale.deriv(x), dtype=float) / self.rho(x)

    def killing_rate(self, x):
        """phi / rho, the non-negative killing rate of the h-transform."""
        x = np.asarray(x, dtype=float)
        if self._killing is not None:
            return self._killing(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.asarray(self.phi(x), dtype=float) / np.asarray(self.rho(x), dtype=float)
        return out


def from_eigen(spec: DiffusionSpec, lam: float) -> ConcaveFn:
    """The eigenfunction psi_{-lam} as a concave-class element.

    Its generating density is lam psi_{-lam}, so the killing rate is the
    constant lam and the class is C2 with bound lam.
    """
    lam = float(lam)
    if lam <= 0:
        raise RangeError("lambda must be positive")
    lam0 = analytic_lambda0(spec)
    if lam0 is None:
        lam0 = estimate_lambda0(spec, tol=1e-3).value
    if lam > lam0 * (1 + 1e-9) + 1e-12:
        raise RangeError(f"lambda={lam} exceeds lambda0={lam0} for {spec.label}")
    psi = best_psi(spec, -lam)
    return ConcaveFn(
        spec=spec,
        rho=psi.value,
        rho_plus=psi.deriv_scale,
        phi=lambda x: lam * psi.value(x),
        klass="C2",
        c2_bound=lam,
        label=f"psi_-{lam:g}[{spec.label}]",
        _log_rho=psi.log_value,
        _dlog_rho=psi.dlog_value,
        _killing=lambda x: np.full_like(np.asarray(x, dtype=float), lam),
    )


def _grid_horizon(spec: DiffusionSpec) -> float:
    """Largest x at which linear-space scale values are still comfortable."""
    cands = np.geomspace(12.0, 400.0, 128)
    with np.errstate(over="ignore"):
        lv = np.asarray(spec.scale.logv(cands), dtype=float)
    ok = cands[lv <= 600.0]
    return float(ok[-1]) if ok.size else 12.0


_FAR_DOUBLINGS = 40


def build_from_phi(
    spec: DiffusionSpec,
    phi: Callable,
    log_phi: Optional[Callable] = None,
    label: str = "",
    policy: DivergencePolicy = DEFAULT_POLICY,
) -> ConcaveFn:
    """Build the concave element generated by phi via nested quadrature.

    Rejects densities that are not m-integrable and constructions whose rho
    stays bounded (possible only when phi eventually vanishes, since the
    boundary at infinity is natural).  Class: C2 iff the killing rate
    phi/rho stabilises to a finite supremum on the doubling grid.

    ``log_phi`` should be supplied whenever phi itself overflows floats
    while phi * m' stays moderate (eigenfunction-shaped densities do this);
    all tail work then runs in log space.
    """
    s = spec.scale
    if log_phi is None:
        def log_dens(x):
            x = np.asarray(x, dtype=float)
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                v = np.asarray(phi(x), dtype=float) * np.asarray(spec.speed(x), dtype=float)
                if np.any(np.isnan(v)) or np.any(np.isinf(v)):
                    raise ClassError(
                        "phi * m' overflowed; pass log_phi for eigenfunction-shaped densities"
                    )
                if np.any(v < 0):
                    raise PreconditionError("generating density must be non-negative")
                return np.log(v)
    else:
        def log_dens(x):
            x = np.asarray(x, dtype=float)
            return np.asarray(log_phi(x), dtype=float) + np.asarray(spec.speed.logd(x), dtype=float)

    X = _grid_horizon(spec)
    from .measures import (
        exp_rule_segments,
        log_precision_horizon,
        log_tail_table,
        power_rule_log_segments,
    )

    parts = [spec.speed.logd, spec.scale.logd] + ([log_phi] if log_phi is not None else [log_dens])
    far = log_tail_table(log_dens, X, log_precision_horizon(parts, X, _FAR_DOUBLINGS))
    if far.divergent:
        raise ClassError("generating density is not m-integrable")
    q_far_X = math.exp(far.log_tail[0])

    # dense where linear-space precision matters, geometric out to the horizon
    xs = [np.array([0.0]), np.geomspace(1e-8, 0.1, 2000)]
    if X <= 15.0:
        xs.append(np.linspace(0.1, X, 12000)[1:])
    else:
        xs.append(np.linspace(0.1, 15.0, 12000)[1:])
        xs.append(np.geomspace(15.0, X, 6000)[1:])
    xs = np.concatenate(xs)
    with np.errstate(over="ignore"):
        dens = np.exp(log_dens(np.maximum(xs, 1e-12)))
    if not np.all(np.isfinite(dens)):
        raise ClassError("generating density overflows inside the working grid")
    seg = exp_rule_segments(xs, dens)
    q = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]]) + q_far_X
    total = float(q[0])
    if not (total > 0 and math.isfinite(total)):
        raise ClassError("generating density has zero or non-finite mass")

    sprime = np.asarray(s.deriv(xs), dtype=float)
    rho_grid = np.concatenate([[0.0], np.cumsum(exp_rule_segments(xs, q * sprime))])
    rho_X = float(rho_grid[-1])
    log_rho_X = math.log(rho_X)
    log_X = math.log(X)

    def _log_growth(xb):
        """log of int_X^x Q s' by a power model anchored at the endpoint.

        The local log-log slope gamma is measured at x; for exponentially
        growing integrands (gamma >> 1) this is the Laplace asymptotic
        f(x) x / gamma, for power-law integrands it is exact, and the
        gamma = -1 limit (rho diverging logarithmically) is taken exactly.
        """
        xb = np.asarray(xb, dtype=float)
        eps = 0.005
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            lf_hi = far(xb * (1 + eps)) + np.asarray(s.logd(xb * (1 + eps)), dtype=float)
            lf_lo = far(xb * (1 - eps)) + np.asarray(s.logd(xb * (1 - eps)), dtype=float)
            lf = far(xb) + np.asarray(s.logd(xb), dtype=float)
            gamma = (lf_hi - lf_lo) / (2.0 * math.log1p(eps))
            gp1 = gamma + 1.0
            ratio = gp1 * (log_X - np.log(xb))
            grow = lf + np.log(xb) + np.log1p(-np.exp(np.minimum(ratio, -1e-300))) - np.log(gp1)
            logdiv = lf + np.log(xb) + np.log(np.log(xb / X))
            shrink = lf + np.log(xb) + np.log(np.expm1(np.maximum(ratio, 1e-300))) - np.log(-gp1)
        out = np.where(gp1 > 1e-6, grow, np.where(gp1 < -1e-6, shrink, logdiv))
        return np.where(np.isnan(out), -math.inf, out)

    # admissibility: the tail integral of Q s' must diverge (gamma >= -1)
    x_edge = far.xs[-1]
    with np.errstate(over="ignore", invalid="ignore"):
        lf_edge = far(np.asarray([x_edge / 1.01, x_edge * 1.01])) + np.asarray(
            s.logd(np.asarray([x_edge / 1.01, x_edge * 1.01])), dtype=float
        )
    gamma_edge = float((lf_edge[1] - lf_edge[0]) / (2.0 * math.log(1.01)))
    if math.isnan(gamma_edge) or gamma_edge < -1.0 - 1e-5 or not np.all(np.isfinite(lf_edge)):
        raise ClassError("rho fails to diverge; the generating density is not admissible")

    # log-log interpolation keeps relative accuracy where rho grows like
    # exp(c x^2); below the first node rho is exactly linear in the scale
    lx_nodes = np.log(xs[1:])
    lrho_nodes = np.log(rho_grid[1:])
    with np.errstate(divide="ignore"):
        lq_nodes = np.log(q[1:])
    x_first = xs[1]
    rho_first = rho_grid[1]
    q_first = q[1]

    def _interp_log(x, nodes):
        return np.interp(np.log(np.maximum(x, x_first)), lx_nodes, nodes)

    def log_rho_fn(x):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        tiny = x < x_first
        mid = (~tiny) & (x <= X)
        big = x > X
        with np.errstate(divide="ignore"):
            out[tiny] = np.log(x[tiny] * (rho_first / x_first))
        out[mid] = _interp_log(x[mid], lrho_nodes)
        if np.any(big):
            out[big] = np.logaddexp(log_rho_X, _log_growth(x[big]))
        return out

    def rho_fn(x):
        x = np.asarray(x, dtype=float)
        with np.errstate(over="ignore"):
            out = np.exp(log_rho_fn(x))
        return out

    def rho_plus_fn(x):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        tiny = x < x_first
        mid = (~tiny) & (x <= X)
        big = x > X
        out[tiny] = q_first
        with np.errstate(over="ignore"):
            out[mid] = np.exp(_interp_log(x[mid], lq_nodes))
        if np.any(big):
            out[big] = np.exp(far(np.maximum(x[big], X)))
        return out

    def dlog_rho_fn(x):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        small = x <= X
        if np.any(small):
            xs_ = x[small]
            out[small] = rho_plus_fn(xs_) * np.asarray(s.deriv(xs_), dtype=float) / rho_fn(xs_)
        if np.any(~small):
            xb = x[~small]
            out[~small] = np.exp(far(xb) + np.asarray(s.logd(xb), dtype=float) - log_rho_fn(xb))
        return out

    killing = None
    if log_phi is not None:
        def killing(x):
            x = np.asarray(x, dtype=float)
            with np.errstate(over="ignore"):
                return np.exp(np.asarray(log_phi(x), dtype=float) - log_rho_fn(x))

    fn = ConcaveFn(
        spec=spec,
        rho=rho_fn,
        rho_plus=rho_plus_fn,
        phi=lambda x: np.asarray(phi(x), dtype=float),
        klass="C1",
        c2_bound=None,
        label=label or "concave(phi)",
        _log_rho=log_rho_fn,
        _dlog_rho=dlog_rho_fn,
        _killing=killing,
    )
    klass, bound = _decide_class(fn, xs, X)
    return dataclasses.replace(fn, klass=klass, c2_bound=bound)


def _decide_class(fn: ConcaveFn, xs: np.ndarray, X: float) -> tuple:
    """Numeric proxy for sup phi/rho < inf: stabilisation on a doubling grid."""
    probe = xs[(xs > 0)]
    kr = np.asarray(fn.killing_rate(probe), dtype=float)
    sup_interior = float(np.max(kr))
    # the x -> 0 end: the rate diverges iff phi(0) > 0, since rho ~ rho'(0) s(x)
    head = kr[probe <= max(1e-4, probe[0] * 4)]
    head_blows = head.size >= 3 and head[0] > 4.0 * head[-1] and head[0] > 10.0 * np.median(kr)
    # the tail end beyond the horizon: phi decays, rho grows, so the rate drops
    tail_xs = X * 2.0 ** np.arange(1, 6)
    with np.errstate(over="ignore", under="ignore"):
        tail_kr = np.asarray(fn.killing_rate(tail_xs), dtype=float)
    tail_kr = tail_kr[np.isfinite(tail_kr)]
    tail_blows = tail_kr.size > 0 and float(np.max(tail_kr)) > 2.0 * sup_interior
    if head_blows or tail_blows:
        return "C1", None
    bound = max(sup_interior, float(np.max(tail_kr)) if tail_kr.size else 0.0)
    return "C2", bound


@dataclasses.dataclass(frozen=True)
class HTransformed:
    """The wide-sense h-transform of a diffusion by a concave element.

    ``spec`` carries speed rho^2 dm and scale rho^{-2} ds (anchored at 1,
    since the transformed scale diverges at the entrance boundary 0); the
    non-negative ``killing_rate`` phi/rho is kept separately, so ``spec``
    is the conservative part of the transformed generator.
    """

    base: DiffusionSpec
    rho: ConcaveFn
    spec: DiffusionSpec

    def killing_rate(self, x):
        return self.rho.killing_rate(x)


def h_transform(spec: DiffusionSpec, rho: ConcaveFn) -> HTransformed:
    """Transform speed and scale by rho^2 and derive the SDE drift.

    For SDE-form specs the transformed drift is b + sigma^2 (log rho)',
    which is what the path engine simulates.
    """
    r = rho

    def speed_density(x):
        return r.rho(np.asarray(x, dtype=float)) ** 2 * np.asarray(spec.speed(x), dtype=float)

    def speed_log_density(x):
        x = np.asarray(x, dtype=float)
        return 2.0 * r.log_rho(x) + np.asarray(spec.speed.logd(x), dtype=float)

    def scale_derivative(x):
        x = np.asarray(x, dtype=float)
        return np.asarray(spec.scale.deriv(x), dtype=float) / r.rho(x) ** 2

    def scale_log_derivative(x):
        x = np.asarray(x, dtype=float)
        return np.asarray(spec.scale.logd(x), dtype=float) - 2.0 * r.log_rho(x)

    sfn = lambda x: float(scale_derivative(np.asarray([x]))[0])
    memo = {}

    def scale_value(x):
        x = np.asarray(x, dtype=float)

        def one(v: float) -> float:
            if v not in memo:
                memo[v], _ = integrate.quad(sfn, 1.0, v, epsrel=1e-10, limit=200)
            return memo[v]

        if x.ndim == 0:
            return float(one(float(x)))
        return np.array([one(float(v)) for v in x])

    h_scale = ScaleFn(
        value=scale_value,
        derivative=scale_derivative,
        origin=1.0,
        log_derivative=scale_log_derivative,
        label=f"s^[{r.label}]",
    )
    h_speed = Measure1D(
        density=speed_density,
        log_density=speed_log_density,
        label=f"rho^2 {spec.speed.label}",
    )
    h_sde = None
    if spec.sde is not None:
        base_sde = spec.sde

        def h_drift(x):
            x = np.asarray(x, dtype=float)
            return np.asarray(base_sde.b(x), dtype=float) + np.asarray(base_sde.sig(x), dtype=float) ** 2 * r.dlog_rho(x)

        h_sde = SdeForm(drift=h_drift, sigma=base_sde.sigma)
    h_spec = DiffusionSpec(
        scale=h_scale,
        speed=h_speed,
        sde=h_sde,
        killing=r.killing_rate,
        label=f"h[{r.label}]({spec.label})",
    )
    return HTransformed(base=spec, rho=r, spec=h_spec)


@dataclasses.dataclass(frozen=True)
class RenewalDensity:
    """Renewal transform of an initial density, with its hitting-time mean."""

    concave: ConcaveFn
    expected_t0: float
    mass: float

    def density_dm(self, x):
        """Density of the transformed law with respect to dm."""
        return self.concave.rho(np.asarray(x, dtype=float))


def _log_dm_density(spec: DiffusionSpec, f: Callable, log_f: Optional[Callable]):
    if log_f is not None:
        return lambda x: np.asarray(log_f(x), dtype=float) + np.asarray(spec.speed.logd(x), dtype=float)

    def log_dens(x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            v = np.asarray(f(x), dtype=float) * np.asarray(spec.speed(x), dtype=float)
        if np.any(~np.isfinite(v) & ~np.isneginf(np.log(np.maximum(v, 0.0)))):
            raise EvaluationError("density overflowed; pass its log form")
        return np.log(np.maximum(v, 0.0))

    return log_dens


def _mass_dm(spec: DiffusionSpec, log_dens: Callable, parts=None) -> float:
    """Total mass of exp(log_dens) over (0, inf): linear head + log tail."""
    from .measures import log_precision_horizon, log_tail_table

    if parts is None:
        parts = [spec.speed.logd, spec.scale.logd, log_dens]
    xs = np.concatenate([[0.0], np.geomspace(1e-8, 1.0, 2000)])
    with np.errstate(over="ignore"):
        vals = np.exp(log_dens(np.maximum(xs, 1e-12)))
    head = float(np.trapezoid(vals, xs))
    tbl = log_tail_table(log_dens, 1.0, log_precision_horizon(parts, 1.0, _FAR_DOUBLINGS))
    if tbl.divergent:
        raise EvaluationError("dm-mass integral diverges")
    return head + math.exp(tbl.log_total)


def expected_hitting_time(
    spec: DiffusionSpec,
    f_dm: Callable,
    log_f_dm: Optional[Callable] = None,
    policy: DivergencePolicy = DEFAULT_POLICY,
) -> float:
    """E_mu T_0 for mu = f dm by the Green-function (potential) formula.

    Equals int_0^inf mu((y, inf)) m((y, inf)) ds(y); both tails are
    accumulated backward in log space so the huge s' factor can cancel
    against them without overflow.
    """
    from .measures import exp_rule_segments, log_precision_horizon, log_tail_table

    log_mu = _log_dm_density(spec, f_dm, log_f_dm)
    X = _grid_horizon(spec)
    parts = [spec.speed.logd, spec.scale.logd] + ([log_f_dm] if log_f_dm is not None else [log_mu])
    hi = log_precision_horizon(parts, X, _FAR_DOUBLINGS)
    mu_far = log_tail_table(log_mu, X, hi)
    m_far = log_tail_table(spec.speed.logd, X, hi)
    if mu_far.divergent:
        raise EvaluationError("initial density tail decays too slowly")
    if m_far.divergent:
        raise EvaluationError("speed measure has infinite tail; hitting times are infinite")

    xs = np.concatenate([[0.0], np.geomspace(1e-8, 0.1, 500), np.linspace(0.1, X, 12000)[1:]])
    with np.errstate(over="ignore"):
        mu_d = np.exp(log_mu(np.maximum(xs, 1e-12)))
        m_d = np.asarray(spec.speed(xs), dtype=float)
    mu_tail = np.concatenate([np.cumsum(exp_rule_segments(xs, mu_d)[::-1])[::-1], [0.0]]) + math.exp(mu_far.log_tail[0])
    m_tail = np.concatenate([np.cumsum(exp_rule_segments(xs, m_d)[::-1])[::-1], [0.0]]) + math.exp(m_far.log_tail[0])
    g = mu_tail * m_tail * np.asarray(spec.scale.deriv(xs), dtype=float)
    e_near = float(np.sum(exp_rule_segments(xs, g)))

    def log_g_far(x):
        x = np.asarray(x, dtype=float)
        return mu_far(x) + m_far(x) + np.asarray(spec.scale.logd(x), dtype=float)

    far_tbl = log_tail_table(log_g_far, X, hi)
    if far_tbl.divergent:
        raise EvaluationError("hitting-time integrand does not decay; E_mu T0 may be infinite")
    return e_near + math.exp(far_tbl.log_total)


def renewal_transform(
    spec: DiffusionSpec,
    f_dm: Callable,
    log_f_dm: Optional[Callable] = None,
    mass_tol: float = 1e-4,
    label: str = "",
) -> RenewalDensity:
    """Renewal transform: normalised expected occupation of the killed process.

    ``f_dm`` is the density of the initial law with respect to dm (checked
    to integrate to 1).  The transformed density with respect to dm is

        (1 / E_mu T0) int_0^x ds(y) int_y^inf f dm,

    which is exactly the concave element generated by phi = f / E_mu T0;
    fixed points are the quasi-stationary densities.
    """
    log_mu = _log_dm_density(spec, f_dm, log_f_dm)
    mass_mu = _mass_dm(spec, log_mu)
    if abs(mass_mu - 1.0) > 1e-3:
        raise PreconditionError(f"initial density has dm-mass {mass_mu}, not a probability")
    e_t0 = expected_hitting_time(spec, f_dm, log_f_dm=log_f_dm)
    if not math.isfinite(e_t0):
        raise EvaluationError("renewal transform undefined: E_mu T0 is not finite")
    log_e = math.log(e_t0)
    phi = lambda x: np.asarray(f_dm(x), dtype=float) / e_t0
    if log_f_dm is not None:
        log_phi = lambda x: np.asarray(log_f_dm(x), dtype=float) - log_e
    else:
        log_phi = None
    concave = build_from_phi(spec, phi, log_phi=log_phi, label=label or "renewal")
    out_log_dens = lambda x: concave.log_rho(np.asarray(x, dtype=float)) + np.asarray(spec.speed.logd(x), dtype=float)
    mass = _mass_dm(spec, out_log_dens)
    if abs(mass - 1.0) > mass_tol:
        raise EvaluationError(f"renewal density mass {mass} deviates from 1 beyond {mass_tol}")
    return RenewalDensity(concave=concave, expected_t0=e_t0, mass=mass)


def perturbed_psi(spec: DiffusionSpec, lam: float, distinct_tol: float = 1e-3) -> ConcaveFn:
    """A C2 element distinct from psi_{-lam} but with an equivalent tail.

    Truncates the eigenfunction below 1 to a scale-linear stub, normalises
    the result to a probability density against dm, and applies the renewal
    transform.  The output is scale-affine in psi_{-lam} beyond 1, has unit
    dm-mass, and its killing rate differs from the constant lam on an
    interior region (the conditionings it induces are distinguishable).
    """
    lam = float(lam)
    lam0 = analytic_lambda0(spec)
    if lam0 is None:
        lam0 = estimate_lambda0(spec, tol=1e-3).value
    if not (0 < lam < lam0 * (1 - 1e-9)):
        raise RangeError(f"need 0 < lambda < lambda0={lam0} strictly, got {lam}")
    psi = best_psi(spec, -lam)
    psi_1 = float(psi.value(np.asarray([1.0]))[0])
    s = spec.scale
    s_1 = float(s(np.asarray([1.0]))[0])

    def psi_trunc(x):
        x = np.asarray(x, dtype=float)
        return np.where(x <= 1.0, psi_1 * np.asarray(s(x), dtype=float) / s_1, psi.value(x))

    def log_psi_trunc(x):
        x = np.asarray(x, dtype=float)
        stub = math.log(psi_1) + np.asarray(s.logv(x), dtype=float) - math.log(s_1)
        return np.where(x <= 1.0, stub, psi.log_value(x))

    log_dens = lambda x: log_psi_trunc(x) + np.asarray(spec.speed.logd(x), dtype=float)
    norm = _mass_dm(spec, log_dens)
    log_norm = math.log(norm)
    f_dm = lambda x: psi_trunc(x) / norm
    log_f_dm = lambda x: log_psi_trunc(x) - log_norm
    rd = renewal_transform(spec, f_dm, log_f_dm=log_f_dm, label=f"perturbed_psi_-{lam:g}[{spec.label}]")
    out = rd.concave
    if out.klass != "C2":
        raise EvaluationError("perturbed construction failed to land in C2")
    probe = np.linspace(0.05, 2.0, 200)
    dev = np.abs(np.asarray(out.killing_rate(probe), dtype=float) - lam)
    if float(np.max(dev)) <= distinct_tol:
        raise EvaluationError("perturbed element is numerically indistinguishable from the eigenfunction")
    return out


@dataclasses.dataclass(frozen=True)
class AbsContinuityReport:
    """Checkable hypotheses of the perturbation absolute-continuity theorem.

    ``eq34_ok``: the supplied bound dominates |L alpha/alpha - L beta/beta|
    on the grid.  ``eq29_ok``: both mixed tail integrals are finite.
    ``eq33_value``: the contraction integral (must be < 1); also evaluated
    with the roles of alpha and beta swapped, since the condition is not
    symmetric.  ``c_limit``: lim beta/alpha at infinity.
    """

    eq34_ok: bool
    eq29_ok: bool
    eq33_value: float
    eq33_value_swapped: float
    c_limit: float
    all_ok: bool
    detail: dict


def _log_scale_tail_table(spec: DiffusionSpec, fn_log_rho: Callable, policy: DivergencePolicy):
    """Tabulate log of int_x^inf s'/rho^2 on a geometric grid, backward."""
    from .measures import log_precision_horizon, log_tail_table

    def log_integrand(x):
        x = np.asarray(x, dtype=float)
        return np.asarray(spec.scale.logd(x), dtype=float) - 2.0 * np.asarray(fn_log_rho(x), dtype=float)

    tbl = log_tail_table(
        log_integrand, 1e-4,
        log_precision_horizon([spec.scale.logd, fn_log_rho], 1e-4, policy.doublings),
    )
    if tbl.divergent:
        raise EvaluationError("scale tail of the h-transform diverges; conditions are void here")
    return tbl, math.exp(tbl.log_total)


def abs_continuity_conditions(
    spec: DiffusionSpec,
    alpha: ConcaveFn,
    beta: ConcaveFn,
    delta: Optional[Callable] = None,
    policy: DivergencePolicy = DEFAULT_POLICY,
) -> AbsContinuityReport:
    """Evaluate the three hypotheses under which P^[alpha] and P^[beta]
    are mutually absolutely continuous at time infinity.

    ``delta`` is a caller-supplied dominating bound for the killing-rate
    difference; the default is the tight choice, the difference itself.
    All tail integrals run in log space via the concave elements' log data.
    """
    ka = lambda x: np.asarray(alpha.killing_rate(x), dtype=float)
    kb = lambda x: np.asarray(beta.killing_rate(x), dtype=float)
    if delta is None:
        delta_fn = lambda x: np.abs(ka(x) - kb(x))
        eq34_ok = True
    else:
        delta_fn = lambda x: np.asarray(delta(x), dtype=float)
        grid = np.concatenate([np.geomspace(1e-4, 1.0, 100), np.geomspace(1.0, 2.0 ** 20, 300)[1:]])
        diff = np.abs(ka(grid) - kb(grid))
        eq34_ok = bool(np.all(diff <= delta_fn(grid) * (1 + 1e-9) + 1e-12))

    def log_delta(x):
        with np.errstate(divide="ignore"):
            return np.log(delta_fn(np.asarray(x, dtype=float)))

    tail_a, _ = _log_scale_tail_table(spec, alpha.log_rho, policy)
    tail_b, _ = _log_scale_tail_table(spec, beta.log_rho, policy)

    def log_eq29_a(x):
        x = np.asarray(x, dtype=float)
        return alpha.log_rho(x) + beta.log_rho(x) + log_delta(x) + np.asarray(spec.speed.logd(x), dtype=float) + tail_a(x)

    def log_eq29_b(x):
        x = np.asarray(x, dtype=float)
        return alpha.log_rho(x) + beta.log_rho(x) + log_delta(x) + np.asarray(spec.speed.logd(x), dtype=float) + tail_b(x)

    out_a = improper_integral_log(log_eq29_a, 1.0, policy=policy)
    out_b = improper_integral_log(log_eq29_b, 1.0, policy=policy)
    eq29_ok = out_a.is_finite and out_b.is_finite

    def eq33_for(first: ConcaveFn, tail_first) -> float:
        def log_integrand(x):
            x = np.asarray(x, dtype=float)
            return (
                2.0 * first.log_rho(x)
                + log_delta(x)
                + np.asarray(spec.speed.logd(x), dtype=float)
                + tail_first(x)
            )

        body = improper_integral_log(log_integrand, 1.0, policy=policy)
        if not body.is_finite:
            return math.inf
        # the (0, 1] head in linear space; integrand vanishes at 0
        xs = np.geomspace(1e-8, 1.0, 2000)
        with np.errstate(over="ignore"):
            vals = np.exp(log_integrand(xs))
        head = float(np.trapezoid(vals, xs))
        return head + math.exp(float(body.value))

    eq33 = eq33_for(alpha, tail_a)
    eq33_sw = eq33_for(beta, tail_b)

    ratio_pts = 2.0 ** np.arange(4, policy.doublings, 4)
    ratios = np.exp(beta.log_rho(ratio_pts) - alpha.log_rho(ratio_pts))
    c_limit = float(ratios[-1])
    all_ok = bool(eq34_ok and eq29_ok and eq33 < 1.0)
    return AbsContinuityReport(
        eq34_ok=eq34_ok,
        eq29_ok=eq29_ok,
        eq33_value=float(eq33),
        eq33_value_swapped=float(eq33_sw),
        c_limit=c_limit,
        all_ok=all_ok,
        detail={
            "eq29_alpha": out_a.status,
            "eq29_beta": out_b.status,
            "ratio_trace": tuple(float(r) for r in ratios),
        },
    )
