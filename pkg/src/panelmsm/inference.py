"""Posterior evaluation, MAP optimisation, Laplace and MCMC inference.

Parameters are estimated on an unconstrained scale: log for rates and
scales, a bounded logistic map of the log-shape interval for shapes,
additive log-ratios for next-state probabilities, identity for covariate
effects.  Gradients and Hessians are computed by central finite
differences (step sizes below), keeping the numerical contract free of
any differentiation framework.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .errors import BoundsError, ConvergenceError, DataError, LaplaceError, SpecError
from .likelihood import OutcomeModel, forward_loglik, loglik_prepared, prepare
from .phasetype import GAMMA, WEIBULL
from .statespace import (
    FLAT_PRIOR,
    CompiledAssembler,
    MarkovStateParams,
    ModelSpec,
    NormalPrior,
    Params,
    SemiMarkovStateParams,
    build_layout,
    feasible_shape_interval,
)

log = logging.getLogger(__name__)

#: Relative step for central finite-difference gradients.
GRAD_REL_STEP = 1e-5
#: Relative step for central finite-difference Hessians.
HESS_REL_STEP = 1e-4
#: Gradient sup-norm below which a MAP fit is reported as converged.
GRAD_TOL = 1e-5
#: Fraction of the log-shape interval kept away from each closed boundary
#: by the logistic shape transform.
SHAPE_EDGE_FRACTION = 1e-6

_LOG_2PI = math.log(2.0 * math.pi)

#: Documented weakly-informative defaults, applied when a parameter has no
#: declared prior.  Keyed by parameter kind.
DEFAULT_PRIORS = {
    "q": NormalPrior(0.0, 2.0),
    "hr": NormalPrior(0.0, 1.0),
    "scale": NormalPrior(0.0, 2.0),
    "aft": NormalPrior(0.0, 1.0),
    "odds": NormalPrior(0.0, 2.3),
    "lor": NormalPrior(0.0, 1.0),
    "shape": {GAMMA: NormalPrior(0.0, 0.5), WEIBULL: NormalPrior(0.0, 0.25)},
}


@dataclass(frozen=True)
class Coordinate:
    """One unconstrained coordinate and its link to a natural parameter."""

    name: str
    kind: str                  # q | hr | shape | scale | aft | odds | lor
    transform: str             # log | id | shape | odds
    state: str
    dest: str = None
    cov: str = None
    lower: float = -math.inf   # log-shape interval (shape coordinates only)
    upper: float = math.inf
    prior: NormalPrior = FLAT_PRIOR


def _shape_interval(spec, r, prior):
    """Log-shape interval: prior truncation intersected with feasibility."""
    lo_nat, hi_nat = feasible_shape_interval(spec, r)
    lo = math.log(lo_nat) if lo_nat > 0 else math.log(0.01)
    hi = math.log(hi_nat)
    lo = max(lo, prior.lower)
    hi = min(hi, prior.upper)
    if not lo < hi:
        raise SpecError(f"shape prior truncation for state {r!r} excludes "
                        "the whole feasible interval")
    return lo, hi


def coordinates(spec):
    """Canonical ordered coordinate list for a model specification.

    Parameter names follow a fixed grammar used in priors, fit artifacts
    and rank tables: ``q(r,s)``, ``hr(r,s,c)``, ``shape(r)``, ``scale(r)``,
    ``odds(r,s)``, ``aft(r,c)``, ``lor(r,s,c)``.
    """
    coords = []

    def prior_for(name, kind, r=None):
        p = spec.priors.get(name)
        if p is not None:
            return p
        d = DEFAULT_PRIORS[kind]
        if kind == "shape":
            return d[spec.sojourn[r].family]
        return d

    for r in spec.states:
        if spec.is_absorbing(r):
            continue
        dests = spec.destinations(r)
        if not spec.is_semi_markov(r):
            for s in dests:
                name = f"q({r},{s})"
                coords.append(Coordinate(name, "q", "log", r, dest=s,
                                         prior=prior_for(name, "q")))
            for s in dests:
                for c in spec.intensity_covariates.get((r, s), []):
                    name = f"hr({r},{s},{c})"
                    coords.append(Coordinate(name, "hr", "id", r, dest=s, cov=c,
                                             prior=prior_for(name, "hr")))
        else:
            name = f"shape({r})"
            pr = prior_for(name, "shape", r)
            lo, hi = _shape_interval(spec, r, pr)
            coords.append(Coordinate(name, "shape", "shape", r,
                                     lower=lo, upper=hi, prior=pr))
            name = f"scale({r})"
            coords.append(Coordinate(name, "scale", "log", r,
                                     prior=prior_for(name, "scale")))
            for s in dests[1:]:
                name = f"odds({r},{s})"
                coords.append(Coordinate(name, "odds", "odds", r, dest=s,
                                         prior=prior_for(name, "odds")))
            for c in spec.scale_covariates.get(r, []):
                name = f"aft({r},{c})"
                coords.append(Coordinate(name, "aft", "id", r, cov=c,
                                         prior=prior_for(name, "aft")))
            for s in dests[1:]:
                for c in spec.odds_covariates.get(r, []):
                    name = f"lor({r},{s},{c})"
                    coords.append(Coordinate(name, "lor", "id", r, dest=s,
                                             cov=c, prior=prior_for(name, "lor")))
    return coords


# -- shape transform -------------------------------------------------------

def _sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _shape_z_to_log(z, lo, hi):
    w = hi - lo
    eps = SHAPE_EDGE_FRACTION
    return lo + w * (eps + (1.0 - 2.0 * eps) * _sigmoid(z))


def _shape_log_to_z(loga, lo, hi):
    w = hi - lo
    eps = SHAPE_EDGE_FRACTION
    u = ((loga - lo) / w - eps) / (1.0 - 2.0 * eps)
    if not 0.0 < u < 1.0:
        raise BoundsError(
            f"log shape {loga} at or outside the mapped interval "
            f"({lo}, {hi})")
    return math.log(u / (1.0 - u))


def _shape_log_jacobian(z, lo, hi):
    # log |d log(a) / d z|
    w = hi - lo
    sp = math.log1p(math.exp(-abs(z))) + max(z, 0.0)  # softplus(z)
    sm = sp - z                                       # softplus(-z)
    return math.log(w * (1.0 - 2.0 * SHAPE_EDGE_FRACTION)) - sp - sm


def transform(params, spec, coords=None):
    """Flat unconstrained vector for a natural parameter set."""
    coords = coords if coords is not None else coordinates(spec)
    v = np.empty(len(coords))
    for i, c in enumerate(coords):
        if c.kind == "q":
            v[i] = math.log(params.markov[c.state].q0[c.dest])
        elif c.kind == "hr":
            v[i] = params.markov[c.state].beta[c.dest][c.cov]
        elif c.kind == "shape":
            v[i] = _shape_log_to_z(math.log(params.semi[c.state].shape),
                                   c.lower, c.upper)
        elif c.kind == "scale":
            v[i] = math.log(params.semi[c.state].scale)
        elif c.kind == "odds":
            probs = params.semi[c.state].next_probs
            base = spec.destinations(c.state)[0]
            v[i] = math.log(probs[c.dest] / probs[base])
        elif c.kind == "aft":
            v[i] = params.semi[c.state].aft[c.cov]
        elif c.kind == "lor":
            v[i] = params.semi[c.state].lor[c.dest][c.cov]
    return v


def untransform(v, spec, coords=None):
    """Natural parameter set for an unconstrained vector."""
    coords = coords if coords is not None else coordinates(spec)
    markov, semi = {}, {}
    for r in spec.states:
        if spec.is_absorbing(r):
            continue
        if spec.is_semi_markov(r):
            semi[r] = SemiMarkovStateParams(
                shape=1.0, scale=1.0,
                next_probs={s: 0.0 for s in spec.destinations(r)},
                aft={}, lor={s: {} for s in spec.destinations(r)[1:]})
        else:
            markov[r] = MarkovStateParams(
                q0={}, beta={s: {} for s in spec.destinations(r)})
    odds = {}
    for c, vi in zip(coords, v):
        vi = float(vi)
        if c.kind == "q":
            markov[c.state].q0[c.dest] = math.exp(vi)
        elif c.kind == "hr":
            markov[c.state].beta[c.dest][c.cov] = vi
        elif c.kind == "shape":
            semi[c.state].shape = math.exp(_shape_z_to_log(vi, c.lower, c.upper))
        elif c.kind == "scale":
            semi[c.state].scale = math.exp(vi)
        elif c.kind == "odds":
            odds.setdefault(c.state, {})[c.dest] = vi
        elif c.kind == "aft":
            semi[c.state].aft[c.cov] = vi
        elif c.kind == "lor":
            semi[c.state].lor[c.dest][c.cov] = vi
    for r, sp in semi.items():
        dests = spec.destinations(r)
        eta = np.array([0.0] + [odds.get(r, {}).get(s, 0.0) for s in dests[1:]])
        eta -= eta.max()
        w = np.exp(eta)
        w /= w.sum()
        sp.next_probs = dict(zip(dests, w))
    return Params(markov=markov, semi=semi)


def natural_value(c, params, spec):
    """Natural-scale value of one coordinate (rate, shape, probability...)."""
    if c.kind == "q":
        return params.markov[c.state].q0[c.dest]
    if c.kind == "hr":
        return params.markov[c.state].beta[c.dest][c.cov]
    if c.kind == "shape":
        return params.semi[c.state].shape
    if c.kind == "scale":
        return params.semi[c.state].scale
    if c.kind == "odds":
        return params.semi[c.state].next_probs[c.dest]
    if c.kind == "aft":
        return params.semi[c.state].aft[c.cov]
    if c.kind == "lor":
        return params.semi[c.state].lor[c.dest][c.cov]
    raise SpecError(f"unknown coordinate kind {c.kind}")


def _normal_logpdf(x, mean, sd):
    z = (x - mean) / sd
    return -0.5 * z * z - math.log(sd) - 0.5 * _LOG_2PI


def _truncnorm_lognorm(mean, sd, lo, hi):
    zlo, zhi = (lo - mean) / sd, (hi - mean) / sd
    mass = stats.norm.cdf(zhi) - stats.norm.cdf(zlo)
    if mass <= 0:
        raise SpecError("prior truncation interval carries no mass")
    return math.log(mass)


class Posterior:
    """Log-posterior of a model given a panel dataset.

    Prepares the dataset once (cohort grouping, emission tables) so that
    repeated evaluations during optimisation or sampling only pay for the
    matrix exponentials and the forward recursion.  With ``dataset=None``
    (or no usable subjects) the density is the prior alone.
    """

    def __init__(self, dataset, spec, outcome=None, time_scale=1.0):
        self.spec = spec
        self.layout = build_layout(spec)
        self.coords = coordinates(spec)
        self.outcome = outcome
        if dataset is not None and dataset.subjects:
            self.prepared = prepare(dataset, spec, self.layout, outcome,
                                    time_scale)
        else:
            self.prepared = None
        self._assembler = CompiledAssembler(spec, self.layout, self.coords)
        self._xmaps = {}

    @property
    def names(self):
        return [c.name for c in self.coords]

    def untransform(self, v):
        return untransform(v, self.spec, self.coords)

    def transform(self, params):
        return transform(params, self.spec, self.coords)

    def _qfun(self, v):
        def qfun(xrow, xkey):
            maps = self._xmaps.get(xkey)
            if maps is None:
                maps = self._xmaps[xkey] = self._assembler.maps_for(xrow)
            return self._assembler.build(v, maps)
        return qfun

    def loglik(self, v):
        if self.prepared is None:
            return 0.0
        try:
            return loglik_prepared(self.prepared, self._qfun(v))
        except (SpecError, DataError):
            raise
        except (OverflowError, ArithmeticError, ValueError):
            return -math.inf

    def log_prior(self, v):
        total = 0.0
        for c, vi in zip(self.coords, v):
            p = c.prior
            if p.flat:
                continue
            if c.kind == "shape":
                loga = _shape_z_to_log(vi, c.lower, c.upper)
                total += (_normal_logpdf(loga, p.mean, p.sd)
                          - _truncnorm_lognorm(p.mean, p.sd, c.lower, c.upper)
                          + _shape_log_jacobian(vi, c.lower, c.upper))
            else:
                total += _normal_logpdf(vi, p.mean, p.sd)
        return total

    def log_density(self, v):
        lp = self.log_prior(v)
        if not np.isfinite(lp):
            return -math.inf
        ll = self.loglik(v)
        return lp + ll

    __call__ = log_density

    def prior_mean_vector(self):
        v = np.zeros(len(self.coords))
        for i, c in enumerate(self.coords):
            if c.prior.flat:
                v[i] = 0.0
            elif c.kind == "shape":
                mid = min(max(c.prior.mean, c.lower + 0.05 * (c.upper - c.lower)),
                          c.upper - 0.05 * (c.upper - c.lower))
                v[i] = _shape_log_to_z(mid, c.lower, c.upper)
            else:
                v[i] = c.prior.mean
        return v

    def sample_prior(self, rng):
        """One coordinate vector drawn from the declared priors."""
        v = np.empty(len(self.coords))
        for i, c in enumerate(self.coords):
            p = c.prior
            if p.flat:
                raise SpecError(f"cannot sample improper flat prior {c.name}")
            if c.kind == "shape":
                loga = _sample_truncnorm(p.mean, p.sd, c.lower, c.upper, rng)
                v[i] = _shape_log_to_z(
                    min(max(loga, c.lower + 1e-9), c.upper - 1e-9),
                    c.lower, c.upper)
            else:
                v[i] = p.mean + p.sd * rng.standard_normal()
        return v


def _sample_truncnorm(mean, sd, lo, hi, rng, size=None):
    if sd == 0.0:
        if not lo <= mean <= hi:
            raise SpecError("degenerate prior mean outside truncation bounds")
        return mean if size is None else np.full(size, mean)
    a, b = (lo - mean) / sd, (hi - mean) / sd
    return stats.truncnorm.rvs(a, b, loc=mean, scale=sd, size=size,
                               random_state=rng)


def log_posterior(v, dataset, spec, outcome=None):
    """Log-posterior density at the unconstrained vector ``v``.

    Convenience wrapper; repeated evaluation should go through a
    ``Posterior`` instance to reuse the prepared dataset.
    """
    return Posterior(dataset, spec, outcome=outcome).log_density(np.asarray(v))


# -- finite differences ----------------------------------------------------

def gradient_fd(f, x, rel_step=GRAD_REL_STEP):
    """Central finite-difference gradient with per-coordinate steps."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(len(x)):
        h = rel_step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def _hessian_fd(f, x, rel_step=HESS_REL_STEP):
    x = np.asarray(x, dtype=float)
    d = len(x)
    h = np.array([rel_step * max(1.0, abs(xi)) for xi in x])
    H = np.empty((d, d))
    f0 = f(x)
    for i in range(d):
        xp, xm = x.copy(), x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        H[i, i] = (f(xp) - 2.0 * f0 + f(xm)) / h[i] ** 2
    for i in range(d):
        for j in range(i + 1, d):
            xpp, xpm, xmp, xmm = x.copy(), x.copy(), x.copy(), x.copy()
            xpp[[i, j]] += h[[i, j]]
            xmm[[i, j]] -= h[[i, j]]
            xpm[i] += h[i]
            xpm[j] -= h[j]
            xmp[i] -= h[i]
            xmp[j] += h[j]
            H[i, j] = H[j, i] = (f(xpp) - f(xpm) - f(xmp) + f(xmm)) / (
                4.0 * h[i] * h[j])
    return 0.5 * (H + H.T)


def hessian_fd(v, dataset, spec, outcome=None, rel_step=HESS_REL_STEP):
    """Central finite-difference Hessian of the log-posterior, symmetrised."""
    post = Posterior(dataset, spec, outcome=outcome)
    H = _hessian_fd(post.log_density, np.asarray(v, dtype=float), rel_step)
    if not np.all(np.isfinite(H)):
        raise ArithmeticError("non-finite entries in finite-difference Hessian")
    return H


# -- fit artifacts ---------------------------------------------------------

@dataclass
class FitResult:
    """MAP point with curvature and (optionally) posterior draws."""

    method: str
    coords: list
    map_point: np.ndarray
    log_posterior_at_map: float
    hessian: np.ndarray = None
    draws: np.ndarray = None
    diagnostics: dict = field(default_factory=dict)
    seed: int = None

    @property
    def names(self):
        return [c.name for c in self.coords]

    @property
    def converged(self):
        return bool(self.diagnostics.get("converged", False))


def _newton_polish(f, x, lp, g, grad_tol, max_rounds=4, reuse_steps=10):
    """Damped (Levenberg-Marquardt style) Newton ascent, reusing each
    Hessian eigendecomposition for several steps.  Finishes the job when
    L-BFGS stalls on tiny relative objective changes short of the gradient
    tolerance: the damping keeps weakly-identified flat directions from
    swamping the step."""
    H = None
    x_of_H = None
    n_steps = 0
    for _ in range(max_rounds):
        if np.max(np.abs(g)) <= grad_tol:
            break
        H = _hessian_fd(f, x)
        x_of_H = x.copy()
        eigval, eigvec = np.linalg.eigh(H)
        # damping floor keeps tau - lambda positive even for indefinite H
        floor = max(0.0, float(eigval.max())) + 1e-10
        tau = floor + 1e-6 * max(1.0, float(-eigval.min()))
        improved_round = False
        for _ in range(reuse_steps):
            gproj = eigvec.T @ g
            accepted = False
            for _ in range(14):
                step = eigvec @ (gproj / (tau - eigval))
                lp_trial = f(x + step)
                if lp_trial > lp:
                    accepted = True
                    break
                tau = max(tau * 8.0, floor + 1e-8)
            if not accepted:
                break
            x, lp = x + step, lp_trial
            g = gradient_fd(f, x)
            n_steps += 1
            improved_round = True
            tau = max(tau / 4.0, floor + 1e-10)
            if np.max(np.abs(g)) <= grad_tol:
                break
        if not improved_round:
            break
    stale = H is not None and np.max(np.abs(x - x_of_H)) > 1e-3
    return x, lp, g, None if stale else H, n_steps


def optimize_map(dataset, spec, init=None, outcome=None, n_starts=1,
                 jitter_sd=0.5, seed=None, grad_tol=GRAD_TOL, maxiter=500,
                 compute_hessian=True, time_scale=1.0):
    """Posterior mode by quasi-Newton (L-BFGS) optimisation.

    Gradients are central finite differences; a short Newton polish runs
    when the returned point's gradient is above ``grad_tol``.  Default
    initialisation is at the prior means (zero for flat priors); with
    ``n_starts > 1`` the extra starts are jittered, guarding against local
    maxima in semi-Markov fits.  Non-convergence is reported in the
    diagnostics, never silently.
    """
    post = Posterior(dataset, spec, outcome=outcome, time_scale=time_scale)
    base_init = np.asarray(init, dtype=float) if init is not None \
        else post.prior_mean_vector()
    if not np.isfinite(post.log_density(base_init)):
        raise ValueError("log posterior not finite at the initial point")
    rng = np.random.default_rng(seed)
    starts = [base_init]
    for _ in range(n_starts - 1):
        starts.append(base_init + jitter_sd * rng.standard_normal(len(base_init)))

    def negf(x):
        return -post.log_density(x)

    def neggrad(x):
        return -gradient_fd(post.log_density, x)

    best = None
    for x0 in starts:
        if not np.isfinite(post.log_density(x0)):
            continue
        res = optimize.minimize(negf, x0, jac=neggrad, method="L-BFGS-B",
                                options=dict(maxiter=maxiter, ftol=1e-13,
                                             gtol=1e-7, maxcor=25))
        if best is None or res.fun < best.fun:
            best = res
    x = best.x
    lp = -best.fun
    g = gradient_fd(post.log_density, x)
    x, lp, g, H, n_newton = _newton_polish(post.log_density, x, lp, g,
                                           grad_tol)
    x, lp, g, snapped = _corner_snap(post, x, lp, g)
    if snapped:
        H = None
    gnorm = float(np.max(np.abs(g)))
    converged = bool(best.success or n_newton) and gnorm < grad_tol
    vertex = False
    if not converged:
        # the matched sojourn family has a corner at shape = 1, where the
        # posterior is continuous but kinked and no gradient criterion can
        # hold; certify optimality directly: no coordinate step improves
        vertex = _vertex_optimal(post.log_density, x, lp)
        converged = vertex
    if not converged:
        log.warning("MAP optimisation did not reach gradient tolerance "
                    "(max |g| = %.3g)", gnorm)
    if compute_hessian and H is None:
        H = _hessian_fd(post.log_density, x)
    diagnostics = dict(converged=converged, grad_norm=gnorm,
                       vertex_optimum=vertex, n_iter=int(best.nit),
                       n_newton_polish=n_newton, message=str(best.message))
    return FitResult("map", post.coords, x, float(lp), hessian=H,
                     diagnostics=diagnostics, seed=seed)


def _corner_snap(post, x, lp, g):
    """Try placing each shape coordinate exactly on the family's corner at
    shape = 1 (where the branch solutions meet and the density is kinked);
    keep any snap that improves the posterior."""
    snapped = False
    for i, c in enumerate(post.coords):
        if c.kind != "shape" or not c.lower < 0.0 < c.upper:
            continue
        z_corner = _shape_log_to_z(0.0, c.lower, c.upper)
        if x[i] == z_corner:
            continue
        trial = x.copy()
        trial[i] = z_corner
        lp_trial = post.log_density(trial)
        if lp_trial > lp:
            x, lp = trial, lp_trial
            snapped = True
    if snapped:
        g = gradient_fd(post.log_density, x)
    return x, lp, g, snapped


def _vertex_optimal(f, x, lp, abs_tol=1e-8):
    """Coordinate-wise optimality certificate for kinked maxima: every
    single-coordinate step of the gradient stencil size fails to improve
    the density by more than ``abs_tol``."""
    for i in range(len(x)):
        h = GRAD_REL_STEP * max(1.0, abs(x[i]))
        for s in (h, -h):
            trial = x.copy()
            trial[i] += s
            if f(trial) > lp + abs_tol:
                return False
    return True


def laplace_draws(fit, n_draws, seed):
    """Draws from the multivariate normal Laplace approximation
    MVN(map, -H^{-1}) on the unconstrained scale.

    Raises ``LaplaceError`` when the curvature is not negative definite
    (singular or indefinite Hessian), reporting the offending eigenvalues.
    """
    if fit.hessian is None:
        raise LaplaceError("fit carries no curvature estimate")
    eigs = np.linalg.eigvalsh(fit.hessian)
    if eigs.max() >= 0:
        raise LaplaceError(
            "Laplace unavailable: Hessian not negative definite "
            f"(eigenvalues {np.array2string(eigs, precision=3)})")
    cov = np.linalg.inv(-fit.hessian)
    cov = 0.5 * (cov + cov.T)
    L = np.linalg.cholesky(cov)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_draws, len(fit.map_point)))
    return fit.map_point + z @ L.T


def fit_laplace(dataset, spec, n_draws=1000, seed=0, outcome=None, **kwargs):
    """MAP fit followed by Laplace draws; returns a laplace-tagged result."""
    fit = optimize_map(dataset, spec, outcome=outcome, seed=seed, **kwargs)
    draws = laplace_draws(fit, n_draws, seed)
    return FitResult("laplace", fit.coords, fit.map_point,
                     fit.log_posterior_at_map, hessian=fit.hessian,
                     draws=draws, diagnostics=fit.diagnostics, seed=seed)


# -- adaptive random-walk Metropolis ----------------------------------------

def _split_rhat(draws, n_splits=4):
    n, d = draws.shape
    L = n // n_splits
    if L < 2:
        return np.full(d, np.nan)
    segs = draws[:L * n_splits].reshape(n_splits, L, d)
    W = segs.var(axis=1, ddof=1).mean(axis=0)
    B = L * segs.mean(axis=1).var(axis=0, ddof=1)
    var_hat = (L - 1) / L * W + B / L
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.sqrt(var_hat / W)


def _lag1_autocorr(x):
    x = x - x.mean()
    denom = float(x @ x)
    if denom == 0:
        return 0.0
    return float(x[:-1] @ x[1:]) / denom


def mcmc_sample(dataset, spec, n_iter, seed, warmup=None, init=None,
                prop_cov=None, outcome=None, time_scale=1.0,
                target_accept=0.234, adapt_cov=True):
    """Adaptive random-walk Metropolis targeting the log-posterior.

    A joint Gaussian proposal is used; its covariance and scale adapt
    during warm-up only (frozen afterwards, so the post-warm-up chain is
    a valid Markov chain with the posterior as its stationary
    distribution).  With ``adapt_cov=False`` the supplied proposal
    covariance shape is kept fixed (useful when it comes from a Laplace
    curvature estimate) and only the scalar scale adapts.  Returns the
    post-warm-up draws plus diagnostics: acceptance rate and the
    split-chain potential-scale-reduction factor.
    """
    post = Posterior(dataset, spec, outcome=outcome, time_scale=time_scale)
    d = len(post.coords)
    if warmup is None:
        warmup = max(n_iter // 4, min(1000, n_iter // 2))
    rng = np.random.default_rng(seed)
    x = np.asarray(init, dtype=float) if init is not None \
        else post.prior_mean_vector()
    lp = post.log_density(x)
    if not np.isfinite(lp):
        raise ValueError("log posterior not finite at the MCMC initial point")
    if prop_cov is None:
        prop_cov = np.eye(d) * 0.01
        adapt_cov = True
    chol = np.linalg.cholesky(prop_cov)
    log_scale = math.log(2.38 / math.sqrt(d))
    mean_acc = np.zeros(d)
    run_mean = x.copy()
    run_m2 = np.zeros((d, d))
    count = 1
    draws = np.empty((n_iter - warmup, d))
    lps = np.empty(n_iter - warmup)
    accepted_post = 0
    batch_accepts, batch_n, batches = 0, 0, 0
    for t in range(n_iter):
        z = rng.standard_normal(d)
        u = math.log(rng.uniform())
        prop = x + math.exp(log_scale) * (chol @ z)
        lpp = post.log_density(prop)
        accept = lpp - lp > u
        if accept:
            x, lp = prop, lpp
        if t < warmup:
            batch_accepts += accept
            batch_n += 1
            delta = x - run_mean
            count += 1
            run_mean += delta / count
            run_m2 += np.outer(delta, x - run_mean)
            if batch_n == 50:
                batches += 1
                rate = batch_accepts / batch_n
                log_scale += (rate - target_accept) * min(0.5, 2.0 / math.sqrt(batches))
                batch_accepts = batch_n = 0
            if adapt_cov and count > max(4 * d, 100) and (t + 1) % 200 == 0:
                cov = run_m2 / (count - 1)
                cov += np.eye(d) * (1e-9 + 1e-6 * np.trace(cov) / d)
                try:
                    chol = np.linalg.cholesky(cov)
                except np.linalg.LinAlgError:
                    pass
        else:
            i = t - warmup
            draws[i] = x
            lps[i] = lp
            accepted_post += accept
    n_post = n_iter - warmup
    acc_rate = accepted_post / n_post
    if accepted_post == 0:
        raise ConvergenceError("MCMC accepted no proposals after adaptation")
    rhat = _split_rhat(draws)
    diagnostics = dict(acceptance_rate=float(acc_rate),
                       rhat=dict(zip(post.names, np.round(rhat, 4))),
                       rhat_max=float(np.nanmax(rhat)),
                       n_warmup=int(warmup))
    return draws, lps, diagnostics


def thin_draws(draws, n_target):
    """Evenly-spaced thinning to at most ``n_target`` draws."""
    n = len(draws)
    if n <= n_target:
        return draws, np.arange(n)
    idx = np.unique(np.linspace(0, n - 1, n_target).round().astype(int))
    return draws[idx], idx


def fit_mcmc(dataset, spec, n_iter=20000, seed=0, warmup=None, outcome=None,
             warm_start=True, **kwargs):
    """MCMC fit; optionally warm-started at the posterior mode with a
    curvature-informed proposal covariance."""
    init = prop_cov = None
    adapt_cov = True
    map_diag = {}
    if warm_start:
        try:
            mapfit = optimize_map(dataset, spec, outcome=outcome,
                                  compute_hessian=True,
                                  time_scale=kwargs.get("time_scale", 1.0))
            init = mapfit.map_point
            map_diag = {"map_" + k: v for k, v in mapfit.diagnostics.items()}
            eigs = np.linalg.eigvalsh(mapfit.hessian)
            if eigs.max() < 0:
                # curvature-shaped proposals; keep the shape frozen so the
                # warm-up only has to tune the scalar step size
                prop_cov = np.linalg.inv(-mapfit.hessian)
                adapt_cov = False
        except (ValueError, ConvergenceError):
            log.warning("MAP warm start failed; starting MCMC at prior means")
    draws, lps, diag = mcmc_sample(dataset, spec, n_iter, seed, warmup=warmup,
                                   init=init, prop_cov=prop_cov,
                                   adapt_cov=adapt_cov, outcome=outcome,
                                   **kwargs)
    diag.update(map_diag)
    diag.setdefault("converged", bool(diag["rhat_max"] < 1.05))
    best = int(np.argmax(lps))
    coords = coordinates(spec)
    return FitResult("mcmc", coords, draws[best], float(lps[best]),
                     draws=draws, diagnostics=diag, seed=seed)


# -- serialization -----------------------------------------------------------

SUMMARY_PROBS = (0.025, 0.25, 0.5, 0.75, 0.975)


def natural_draw_table(fit, spec):
    """Natural-parameter values per posterior draw.

    Returns (names, matrix): rates / shapes / scales on their natural
    scales, covariate effects as-is, and next-state probabilities for
    every destination (including the baseline) of each semi-Markov state.
    """
    if fit.draws is None:
        raise ValueError("fit carries no draws")
    names = []
    for c in fit.coords:
        names.append(f"p({c.state},{c.dest})" if c.kind == "odds" else c.name)
    base_cols = []
    for r in spec.semi_markov_states:
        dests = spec.destinations(r)
        if len(dests) > 1:
            base_cols.append((r, dests[0]))
            names.append(f"p({r},{dests[0]})")
    out = np.empty((len(fit.draws), len(names)))
    for i, v in enumerate(fit.draws):
        params = untransform(v, spec, fit.coords)
        vals = [natural_value(c, params, spec) for c in fit.coords]
        vals += [params.semi[r].next_probs[s] for (r, s) in base_cols]
        out[i] = vals
    return names, out


def summarize_draws(fit, spec, probs=SUMMARY_PROBS):
    """Quantile summary (per natural parameter) of the posterior draws."""
    names, table = natural_draw_table(fit, spec)
    qs = np.quantile(table, probs, axis=0)
    out = {}
    for j, name in enumerate(names):
        entry = {f"q{100 * p:g}": float(qs[i, j]) for i, p in enumerate(probs)}
        entry["median"] = float(np.quantile(table[:, j], 0.5))
        out[name] = entry
    return out


def fitresult_to_dict(fit, spec):
    """JSON-ready representation: transform metadata, MAP, draw summaries
    and diagnostics (raw draws are stored separately as CSV)."""
    def clean(x):
        if isinstance(x, dict):
            return {k: clean(v) for k, v in x.items()}
        if isinstance(x, (np.floating, np.integer)):
            return x.item()
        if isinstance(x, np.ndarray):
            return x.tolist()
        return x

    d = {
        "method": fit.method,
        "coordinates": [
            {"name": c.name, "transform": c.transform,
             **({"lower": c.lower, "upper": c.upper}
                if c.kind == "shape" else {})}
            for c in fit.coords
        ],
        "map": [float(x) for x in fit.map_point],
        "log_posterior_at_map": float(fit.log_posterior_at_map),
        "converged": fit.converged,
        "diagnostics": clean(fit.diagnostics),
        "n_draws": 0 if fit.draws is None else int(len(fit.draws)),
        "seed": fit.seed,
    }
    if fit.draws is not None:
        d["draws_summary"] = summarize_draws(fit, spec)
    return d


def fitresult_from_dict(d, spec, draws=None):
    """Rebuild a ``FitResult`` from its JSON dict (and optional draws)."""
    coords = coordinates(spec)
    stored = [c["name"] for c in d["coordinates"]]
    if stored != [c.name for c in coords]:
        raise SpecError("fit artifact does not match the model configuration")
    return FitResult(d["method"], coords, np.asarray(d["map"], dtype=float),
                     d["log_posterior_at_map"], draws=draws,
                     diagnostics=dict(d.get("diagnostics", {})),
                     seed=d.get("seed"))


# -- prior elicitation helpers ----------------------------------------------

def elicit_logodds_prior(rate_prior_j, rate_prior_1):
    """Normal prior for a log odds (or log odds-ratio) as the difference of
    two independent normal log-rate (or log hazard-ratio) priors."""
    return NormalPrior(rate_prior_j.mean - rate_prior_1.mean,
                       math.hypot(rate_prior_j.sd, rate_prior_1.sd))


def markov_sojourn_prior_quantiles(rate_priors, n_sims=1_000_000, seed=0):
    """Median and IQR of the mean sojourn time 1 / sum(rates) implied by
    log-normal priors on the competing transition rates."""
    rng = np.random.default_rng(seed)
    total = np.zeros(n_sims)
    for p in rate_priors:
        total += np.exp(p.mean + p.sd * rng.standard_normal(n_sims))
    msoj = 1.0 / total
    q25, q50, q75 = np.quantile(msoj, [0.25, 0.5, 0.75])
    return float(q50), float(q75 - q25)


def _shape_factor_sample(shape_prior, family, nphase, n_sims, rng):
    lo, hi = shape_prior.lower, shape_prior.upper
    if not np.isfinite(lo) or not np.isfinite(hi):
        from .phasetype import WEIBULL_SHAPE_FLOOR, shape_upper_bound
        lo_nat = WEIBULL_SHAPE_FLOOR if family == WEIBULL else 0.01
        lo = max(lo, math.log(lo_nat))
        hi = min(hi, math.log(shape_upper_bound(family, nphase)))
    loga = _sample_truncnorm(shape_prior.mean, shape_prior.sd, lo, hi, rng,
                             size=n_sims)
    a = np.exp(loga)
    if family == WEIBULL:
        from scipy.special import gamma as gammafn
        return gammafn(1.0 + 1.0 / a)
    return a  # gamma family: mean = shape * scale


def implied_sojourn_quantiles(scale_prior, shape_prior, family, nphase,
                              n_sims=200_000, seed=0):
    """Median and IQR of the mean sojourn time implied by normal priors on
    the log scale and (truncated) log shape."""
    rng = np.random.default_rng(seed)
    factor = _shape_factor_sample(shape_prior, family, nphase, n_sims, rng)
    z = rng.standard_normal(n_sims)
    sam = np.exp(scale_prior.mean + scale_prior.sd * z) * factor
    q25, q50, q75 = np.quantile(sam, [0.25, 0.5, 0.75])
    return float(q50), float(q75 - q25)


def elicit_scale_prior(target_median, target_iqr, shape_prior, family, nphase,
                       seed=0, n_sims=200_000, maxiter=300):
    """Normal prior for the log scale whose implied mean-sojourn prior has
    the requested median and IQR.

    The mean sojourn is b * Gamma(1 + 1/a) (Weibull) or a * b (Gamma); the
    (mean, sd) of the log-scale prior are found by derivative-free search
    on a fixed simulation sample (common random numbers under the given
    seed).
    """
    if target_median <= 0 or target_iqr <= 0:
        raise ValueError("targets must be positive")
    rng = np.random.default_rng(seed)
    factor = _shape_factor_sample(shape_prior, family, nphase, n_sims, rng)
    z = rng.standard_normal(n_sims)

    def implied(m, s):
        sam = np.exp(m + s * z) * factor
        q25, q50, q75 = np.quantile(sam, [0.25, 0.5, 0.75])
        return q50, q75 - q25

    def objective(par):
        med, iqr = implied(par[0], math.exp(par[1]))
        return (med - target_median) ** 2 + (iqr - target_iqr) ** 2

    m0 = math.log(target_median / np.median(factor))
    res = optimize.minimize(objective, np.array([m0, 0.0]),
                            method="Nelder-Mead",
                            options=dict(maxiter=maxiter, xatol=1e-4,
                                         fatol=1e-6 * target_median**2))
    if not res.success:
        raise ConvergenceError(
            f"scale prior search did not converge: {res.message}")
    return NormalPrior(float(res.x[0]), float(math.exp(res.x[1])))
