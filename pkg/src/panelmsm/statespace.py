"""Observable model definition and its expansion to the latent phase space.

A ``ModelSpec`` declares the observable states, the allowed instantaneous
transitions, which states carry phase-type (semi-Markov) sojourn
distributions, the covariate design, and the priors.  ``build_layout``
maps observable states to latent phase index ranges, and ``assemble_Q``
produces the latent intensity matrix for a given parameter set and
covariate values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import SpecError
from .phasetype import FAMILIES, ShapeScaleSpec, shape_upper_bound, shapescale_to_rates


@dataclass(frozen=True)
class NormalPrior:
    """Normal prior on a parameter's transformed scale, optionally truncated.

    ``flat`` marks an improper uniform prior (density contribution zero);
    truncation bounds are used for shape parameters only.
    """

    mean: float = 0.0
    sd: float = 1.0
    lower: float = -math.inf
    upper: float = math.inf
    flat: bool = False

    def __post_init__(self):
        if not self.flat:
            if not self.sd >= 0:
                raise SpecError(f"prior sd must be non-negative, got {self.sd}")
            if not self.lower < self.upper:
                raise SpecError("empty prior truncation interval")


FLAT_PRIOR = NormalPrior(flat=True)


@dataclass(frozen=True)
class SojournModel:
    family: str
    nphase: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise SpecError(f"unknown sojourn family {self.family!r}")
        if not 2 <= self.nphase <= 10:
            raise SpecError(f"phase count must be in 2..10, got {self.nphase}")


@dataclass
class ModelSpec:
    """States, transitions, Markov/semi-Markov partition, covariates, priors.

    ``states`` is the ordered list of observable state names; ``allowed``
    the ordered (from, to) pairs; ``sojourn`` maps semi-Markov states to
    their approximating family; the three covariate maps give named
    covariates per Markov transition intensity, per sojourn scale and per
    next-state odds; ``priors`` is keyed by canonical parameter name (see
    ``panelmsm.inference.coordinates``).
    """

    states: list[str]
    allowed: list[tuple[str, str]]
    sojourn: dict[str, SojournModel] = field(default_factory=dict)
    intensity_covariates: dict[tuple[str, str], list[str]] = field(default_factory=dict)
    scale_covariates: dict[str, list[str]] = field(default_factory=dict)
    odds_covariates: dict[str, list[str]] = field(default_factory=dict)
    priors: dict[str, NormalPrior] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    # -- structure queries ----------------------------------------------
    def state_index(self, name):
        try:
            return self.states.index(name)
        except ValueError:
            raise SpecError(f"unknown state {name!r}") from None

    def destinations(self, r):
        """Allowed destinations of r, ordered by state index (the first is
        the baseline destination of the next-state logit)."""
        dests = [s for (a, s) in self.allowed if a == r]
        return sorted(dests, key=self.state_index)

    def is_absorbing(self, r):
        return not self.destinations(r)

    def is_semi_markov(self, r):
        return r in self.sojourn

    @property
    def markov_states(self):
        return [r for r in self.states
                if not self.is_semi_markov(r) and not self.is_absorbing(r)]

    @property
    def semi_markov_states(self):
        return [r for r in self.states if self.is_semi_markov(r)]

    @property
    def covariate_names(self):
        names = []
        for lst in (list(self.intensity_covariates.values())
                    + list(self.scale_covariates.values())
                    + list(self.odds_covariates.values())):
            for c in lst:
                if c not in names:
                    names.append(c)
        return names

    def validate(self):
        if len(set(self.states)) != len(self.states):
            raise SpecError("duplicate state names")
        if not self.states:
            raise SpecError("no states declared")
        seen = set()
        for (r, s) in self.allowed:
            if r == s:
                raise SpecError(f"self-transition ({r},{s}) not allowed")
            if r not in self.states or s not in self.states:
                raise SpecError(f"transition ({r},{s}) names an unknown state")
            if (r, s) in seen:
                raise SpecError(f"duplicate transition ({r},{s})")
            seen.add((r, s))
        for r in self.sojourn:
            if r not in self.states:
                raise SpecError(f"sojourn model for unknown state {r!r}")
            if self.is_absorbing(r):
                raise SpecError(f"absorbing state {r!r} cannot be semi-Markov")
        for (r, s) in self.intensity_covariates:
            if (r, s) not in self.allowed:
                raise SpecError(f"covariates on disallowed transition ({r},{s})")
            if self.is_semi_markov(r):
                raise SpecError(
                    f"state {r!r} is semi-Markov; use scale/odds covariates")
        for r in self.scale_covariates:
            if not self.is_semi_markov(r):
                raise SpecError(f"scale covariates on non-semi-Markov state {r!r}")
        for r in self.odds_covariates:
            if not self.is_semi_markov(r):
                raise SpecError(f"odds covariates on non-semi-Markov state {r!r}")
            if len(self.destinations(r)) < 2:
                raise SpecError(
                    f"state {r!r} has a single destination; odds covariates "
                    "have nothing to act on")


@dataclass(frozen=True)
class LatentLayout:
    """Mapping from observable states to contiguous latent index ranges."""

    latent_dim: int
    phase_index: dict          # state name -> range of latent indices
    first_phase: dict          # state name -> entry latent index
    parent: tuple              # latent index -> observable state index

    def phases_of(self, name):
        return self.phase_index[name]


def build_layout(spec):
    """Deterministic latent layout: states in declaration order, semi-Markov
    state r occupying nphase(r) consecutive indices, all others one."""
    phase_index, first_phase, parent = {}, {}, []
    pos = 0
    for idx, r in enumerate(spec.states):
        width = spec.sojourn[r].nphase if spec.is_semi_markov(r) else 1
        phase_index[r] = range(pos, pos + width)
        first_phase[r] = pos
        parent.extend([idx] * width)
        pos += width
    return LatentLayout(pos, phase_index, first_phase, tuple(parent))


@dataclass
class MarkovStateParams:
    """Baseline intensities and log hazard ratios for one Markov state."""

    q0: dict                   # dest name -> baseline intensity
    beta: dict = field(default_factory=dict)   # dest -> {cov -> log HR}


@dataclass
class SemiMarkovStateParams:
    """Shape-scale sojourn and next-state parameters for one state."""

    shape: float
    scale: float
    next_probs: dict                            # dest name -> baseline prob
    aft: dict = field(default_factory=dict)     # cov -> log time-acceleration
    lor: dict = field(default_factory=dict)     # dest -> {cov -> log odds ratio}


@dataclass
class Params:
    """Natural-scale parameter values for every state of a ``ModelSpec``."""

    markov: dict = field(default_factory=dict)  # state -> MarkovStateParams
    semi: dict = field(default_factory=dict)    # state -> SemiMarkovStateParams


def _linpred(covmap, x):
    out = 0.0
    for name, coef in covmap.items():
        try:
            out += coef * x[name]
        except KeyError:
            raise SpecError(f"missing covariate value {name!r}") from None
    return out


def next_state_probs(params, spec, r, x):
    """Destination probabilities for semi-Markov state r at covariates x.

    Softmax of {0, alpha_j + gamma_j . x} over destinations ordered with
    the baseline (lowest-indexed) destination first, where alpha_j is the
    baseline log odds; at x = 0 this returns the baseline probabilities
    exactly.
    """
    if not spec.is_semi_markov(r):
        raise SpecError(f"state {r!r} is not semi-Markov")
    dests = spec.destinations(r)
    sp = params.semi[r]
    if len(dests) == 1:
        return np.array([1.0])
    p0 = np.array([sp.next_probs[s] for s in dests])
    eta = np.log(p0 / p0[0])
    for j, s in enumerate(dests[1:], start=1):
        eta[j] += _linpred(sp.lor.get(s, {}), x)
    eta -= eta.max()
    w = np.exp(eta)
    return w / w.sum()


def assemble_Q(params, spec, layout, x=None):
    """Latent intensity matrix at covariate values ``x``.

    Markov rows use proportional intensities; a semi-Markov state's phase
    chain rates all scale by its common time-acceleration factor, and each
    phase's exit rate is split across destinations by ``next_state_probs``.
    Destinations are entered at their first phase; absorbing rows are zero;
    the diagonal makes every row sum to zero.
    """
    x = x or {}
    Q = np.zeros((layout.latent_dim, layout.latent_dim))
    for r in spec.states:
        if spec.is_absorbing(r):
            continue
        if spec.is_semi_markov(r):
            sp = params.semi[r]
            sj = spec.sojourn[r]
            rates = shapescale_to_rates(
                ShapeScaleSpec(sj.family, sp.shape, sp.scale, sj.nphase))
            accel = math.exp(_linpred(sp.aft, x))
            probs = next_state_probs(params, spec, r, x)
            dests = spec.destinations(r)
            phases = layout.phases_of(r)
            for i, row in enumerate(phases):
                if i < len(phases) - 1:
                    Q[row, phases[i + 1]] = rates.prog[i] * accel
                ex = rates.exit[i] * accel
                if ex > 0:
                    for pj, s in zip(probs, dests):
                        Q[row, layout.first_phase[s]] += ex * pj
        else:
            row = layout.first_phase[r]
            mp = params.markov[r]
            for s in spec.destinations(r):
                q = mp.q0[s] * math.exp(_linpred(mp.beta.get(s, {}), x))
                Q[row, layout.first_phase[s]] = q
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return Q


def feasible_shape_interval(spec, r):
    """Open feasible shape interval (natural scale) for semi-Markov state r."""
    sj = spec.sojourn[r]
    lo = 0.05 if sj.family == "weibull" else 0.0
    return lo, shape_upper_bound(sj.family, sj.nphase)


class CompiledAssembler:
    """Vectorised latent-intensity assembly from an unconstrained vector.

    Precompiles, per covariate row, the linear maps taking the coordinate
    vector to log Markov intensities, time-acceleration factors and
    next-state log odds, so that repeated likelihood evaluations avoid the
    per-call dictionary walking of ``assemble_Q``.  Produces matrices
    identical to ``assemble_Q`` (asserted by tests).
    """

    def __init__(self, spec, layout, coords):
        self.spec = spec
        self.layout = layout
        self.dim = len(coords)
        index = {c.name: i for i, c in enumerate(coords)}
        self.markov = []   # (row, col, iq, [(ibeta, cov), ...])
        self.semi = []     # per state: dict of structure
        for r in spec.states:
            if spec.is_absorbing(r):
                continue
            dests = spec.destinations(r)
            if not spec.is_semi_markov(r):
                for s in dests:
                    betas = [(index[f"hr({r},{s},{c})"], c)
                             for c in spec.intensity_covariates.get((r, s), [])]
                    self.markov.append((layout.first_phase[r],
                                        layout.first_phase[s],
                                        index[f"q({r},{s})"], betas))
            else:
                sj = spec.sojourn[r]
                shape_c = coords[index[f"shape({r})"]]
                afts = [(index[f"aft({r},{c})"], c)
                        for c in spec.scale_covariates.get(r, [])]
                odds = []
                for s in dests[1:]:
                    lors = [(index[f"lor({r},{s},{c})"], c)
                            for c in spec.odds_covariates.get(r, [])]
                    odds.append((index[f"odds({r},{s})"], lors))
                self.semi.append(dict(
                    state=r, family=sj.family, nphase=sj.nphase,
                    ishape=index[f"shape({r})"],
                    shape_bounds=(shape_c.lower, shape_c.upper),
                    iscale=index[f"scale({r})"],
                    rows=np.asarray(layout.phases_of(r)),
                    dest_cols=np.asarray([layout.first_phase[s]
                                          for s in dests]),
                    afts=afts, odds=odds))

    def _xmaps(self, xrow):
        """Per-covariate-row linear maps from v to the needed predictors."""
        d = self.dim
        Lq = np.zeros((len(self.markov), d))
        for t, (_, _, iq, betas) in enumerate(self.markov):
            Lq[t, iq] = 1.0
            for ib, cov in betas:
                Lq[t, ib] = xrow.get(cov, 0.0)
        semi_maps = []
        for blk in self.semi:
            aft = np.zeros(d)
            for ia, cov in blk["afts"]:
                aft[ia] = xrow.get(cov, 0.0)
            eta = np.zeros((len(blk["odds"]), d))
            for j, (io, lors) in enumerate(blk["odds"]):
                eta[j, io] = 1.0
                for il, cov in lors:
                    eta[j, il] = xrow.get(cov, 0.0)
            semi_maps.append((aft, eta))
        return Lq, semi_maps

    def maps_for(self, xrow):
        return self._xmaps(xrow)

    def build(self, v, maps):
        """Latent intensity matrix for coordinate vector v under the
        precompiled covariate maps."""
        from .inference import _shape_z_to_log  # deferred: avoids a cycle
        Lq, semi_maps = maps
        K = self.layout.latent_dim
        Q = np.zeros((K, K))
        if self.markov:
            with np.errstate(over="raise"):
                qvals = np.exp(Lq @ v)
            for t, (row, col, _, _) in enumerate(self.markov):
                Q[row, col] = qvals[t]
        for blk, (aft, eta) in zip(self.semi, semi_maps):
            lo, hi = blk["shape_bounds"]
            a = math.exp(_shape_z_to_log(float(v[blk["ishape"]]), lo, hi))
            b = math.exp(float(v[blk["iscale"]]))
            rates = shapescale_to_rates(
                ShapeScaleSpec(blk["family"], a, b, blk["nphase"]))
            accel = math.exp(float(aft @ v))
            if len(eta):
                e = np.concatenate(([0.0], eta @ v))
                e -= e.max()
                w = np.exp(e)
                probs = w / w.sum()
            else:
                probs = np.ones(1)
            rows = blk["rows"]
            exit_rates = np.asarray(rates.exit) * accel
            Q[np.ix_(rows, blk["dest_cols"])] = np.outer(exit_rates, probs)
            if len(rows) > 1:
                Q[rows[:-1], rows[1:]] = np.asarray(rates.prog) * accel
        np.fill_diagonal(Q, 0.0)
        np.fill_diagonal(Q, -Q.sum(axis=1))
        return Q
