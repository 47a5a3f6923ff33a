"""Panel-data likelihood via matrix exponentials and the forward algorithm.

A subject's contribution marginalises the unobserved latent path through
the hidden-Markov forward recursion: probabilities are propagated through
``expm(Q dt)`` between observation times and filtered by the emission
vector of each observation.  Per-step renormalisation guards against
underflow; exactly-timed entries into absorbing states contribute the
transition intensity instead of a transition probability.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm as _sexpm

from .errors import DataError, SpecError
from .statespace import assemble_Q, build_layout

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Observation:
    """One recorded outcome: an exact state, a censor set, or an
    exactly-timed entry into an absorbing state (``exact_entry``)."""

    states: frozenset
    exact_entry: bool = False

    def __post_init__(self):
        if not self.states:
            raise DataError("empty observation state set")
        if self.exact_entry and len(self.states) != 1:
            raise DataError("exact-entry observation must name a single state")

    @property
    def is_exact(self):
        return len(self.states) == 1

    @classmethod
    def exact(cls, idx):
        return cls(frozenset({idx}))

    @classmethod
    def censored(cls, idxs):
        return cls(frozenset(idxs))

    @classmethod
    def exact_absorbing(cls, idx):
        return cls(frozenset({idx}), exact_entry=True)


@dataclass
class Subject:
    """One trajectory: strictly increasing times, observations, covariates."""

    id: str
    times: np.ndarray
    obs: list
    covs: np.ndarray  # (n_records, n_covariates), may have zero columns

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.covs = np.atleast_2d(np.asarray(self.covs, dtype=float))
        if self.covs.shape[0] != len(self.times) and self.covs.size == 0:
            self.covs = np.zeros((len(self.times), 0))
        if len(self.times) != len(self.obs) or self.covs.shape[0] != len(self.times):
            raise DataError(f"subject {self.id}: record arrays disagree in length")
        if np.any(np.diff(self.times) <= 0):
            raise DataError(f"subject {self.id}: times not strictly increasing")
        for j, ob in enumerate(self.obs):
            if ob.exact_entry and j != len(self.obs) - 1:
                raise DataError(
                    f"subject {self.id}: exact-entry record must be the last")


@dataclass
class PanelDataset:
    """Per-subject observation sequences with a shared covariate schema."""

    covariate_names: list
    subjects: list

    def __post_init__(self):
        ncov = len(self.covariate_names)
        for s in self.subjects:
            if s.covs.shape[1] != ncov:
                raise DataError(
                    f"subject {s.id}: expected {ncov} covariate columns, "
                    f"got {s.covs.shape[1]}")

    def validate_against(self, spec):
        nstates = len(spec.states)
        for name in spec.covariate_names:
            if name not in self.covariate_names:
                raise DataError(f"model needs covariate {name!r}, "
                                "absent from the dataset")
        for s in self.subjects:
            for j, ob in enumerate(s.obs):
                for st in ob.states:
                    if not 0 <= st < nstates:
                        raise DataError(
                            f"subject {s.id} record {j + 1}: state index "
                            f"{st + 1} out of range")
                if ob.exact_entry:
                    name = spec.states[next(iter(ob.states))]
                    if not spec.is_absorbing(name):
                        raise DataError(
                            f"subject {s.id}: exact-entry time into "
                            f"non-absorbing state {name!r}")


class OutcomeModel:
    """Emission model over the latent space.

    Default: exact phase-membership indicators.  Optionally a fixed
    misclassification matrix over observable states (row r = distribution
    of the observed state given true state r), lifted to the latent space
    through the phase-to-state map.  Censor-set observations always use
    plain set-membership indicators.
    """

    def __init__(self, layout, misclass=None):
        self.layout = layout
        parent = np.asarray(layout.parent)
        nstates = parent.max() + 1
        if misclass is not None:
            misclass = np.asarray(misclass, dtype=float)
            if misclass.shape != (nstates, nstates):
                raise SpecError(
                    f"misclassification matrix must be {nstates}x{nstates}")
            if np.any(misclass < 0) or not np.allclose(misclass.sum(axis=1), 1.0):
                raise SpecError("misclassification rows must be distributions")
        self.misclass = misclass
        self._membership = np.stack([parent == s for s in range(nstates)])

    def emission(self, ob):
        """P(observed record | latent state k), as a latent-length vector."""
        if ob.is_exact and self.misclass is not None:
            o = next(iter(ob.states))
            return self.misclass[:, o][np.asarray(self.layout.parent)].astype(float)
        vec = np.zeros(len(self.layout.parent))
        for s in ob.states:
            vec[self._membership[s]] = 1.0
        return vec

    def initial_distribution(self, ob):
        """Occupancy at a subject's first record: mass on the first phase of
        the observed state, uniform over first phases of a censor set."""
        vec = np.zeros(len(self.layout.parent))
        states = sorted(ob.states)
        for s in states:
            name = _state_name(self.layout, s)
            vec[self.layout.first_phase[name]] = 1.0 / len(states)
        return vec

    def sample_observed(self, latent_state, rng):
        s = self.layout.parent[latent_state]
        if self.misclass is None:
            return s
        return int(rng.choice(len(self.misclass), p=self.misclass[s]))


def _state_name(layout, idx):
    for name, rng_ in layout.phase_index.items():
        if layout.parent[rng_.start] == idx:
            return name
    raise SpecError(f"no state with index {idx}")


def expm(Q, t):
    """Transition probability matrix over an interval of length t.

    Scaling-and-squaring with a degree-13 Pade approximant and norm-based
    scaling (scipy's expm); the result is checked to be stochastic within
    1e-10 and clamped onto [0, 1].
    """
    Q = np.asarray(Q, dtype=float)
    if not np.all(np.isfinite(Q)):
        raise ValueError("non-finite entries in intensity matrix")
    if t < 0:
        raise ValueError(f"t must be non-negative, got {t}")
    if t == 0 or not Q.any():
        return np.eye(Q.shape[0])
    P = _sexpm(Q * t)
    rows = P.sum(axis=1)
    if np.any(np.abs(rows - 1.0) > 1e-10):
        raise ArithmeticError(
            f"matrix exponential lost stochasticity (max row error "
            f"{np.abs(rows - 1.0).max():.2e})")
    return np.clip(P, 0.0, 1.0)


def _expm_hot(Q, t):
    """Same computation as ``expm`` for the repeated-evaluation engine,
    with the finiteness of Q guaranteed by the caller and a single
    stochasticity check."""
    P = _sexpm(Q * t)
    err = abs(float(P.sum()) - P.shape[0])
    if not err < 1e-9 * P.shape[0]:
        raise ArithmeticError("matrix exponential lost stochasticity")
    np.clip(P, 0.0, 1.0, out=P)
    return P


# -- prepared (cohort-grouped) representation of a dataset ----------------

@dataclass
class _Cohort:
    """Subjects sharing an identical interval/covariate signature, letting
    the forward recursion run batched on a (members x latent) matrix."""

    ids: list
    dts: np.ndarray            # (J-1,)
    xrows: list                # J-1 covariate dicts (interval left endpoints)
    xkeys: list                # hashable cache keys for the covariate rows
    init: np.ndarray           # (m, K)
    emissions: list            # per step j=1..J-1: (m, K) weight matrix
    exact_rows: list           # per step: list of (member_row, absorbing latent)


@dataclass
class PreparedData:
    cohorts: list
    layout: object
    outcome: object


def prepare(dataset, spec, layout, outcome=None, time_scale=1.0):
    """Group subjects into cohorts and precompute emission weights."""
    dataset.validate_against(spec)
    outcome = outcome or OutcomeModel(layout)
    names = dataset.covariate_names
    groups = {}
    for s in dataset.subjects:
        if len(s.times) < 2:
            continue  # no likelihood contribution
        dts = np.diff(s.times) * time_scale
        key = (dts.tobytes(), s.covs[:-1].tobytes())
        groups.setdefault(key, []).append(s)
    cohorts = []
    for members in groups.values():
        first = members[0]
        dts = np.diff(first.times) * time_scale
        xrows = [dict(zip(names, row)) for row in first.covs[:-1]]
        xkeys = [row.tobytes() for row in first.covs[:-1]]
        init = np.stack([outcome.initial_distribution(m.obs[0])
                         for m in members])
        if outcome.misclass is not None:
            init = init * np.stack([outcome.emission(m.obs[0]) for m in members])
        emissions, exact_rows = [], []
        for j in range(1, len(first.times)):
            E = np.stack([outcome.emission(m.obs[j]) for m in members])
            ex = [(i, layout.first_phase[spec.states[next(iter(m.obs[j].states))]])
                  for i, m in enumerate(members) if m.obs[j].exact_entry]
            emissions.append(E)
            exact_rows.append(ex)
        cohorts.append(_Cohort([m.id for m in members], dts, xrows, xkeys,
                               init, emissions, exact_rows))
    return PreparedData(cohorts, layout, outcome)


def _forward_cohort(cohort, qcache, pcache, qfun):
    """Log-likelihood contributions for every member of one cohort."""
    pi = cohort.init.copy()
    buf = np.empty_like(pi)
    m = pi.shape[0]
    loglik = np.zeros(m)
    alive = np.ones(m, dtype=bool)
    _renormalise(pi, pi.sum(axis=1), loglik, alive)
    for j, dt in enumerate(cohort.dts):
        xkey = cohort.xkeys[j]
        Q = qcache.get(xkey)
        if Q is None:
            Q = qcache[xkey] = qfun(cohort.xrows[j], xkey)
        P = pcache.get((xkey, dt))
        if P is None:
            P = pcache[(xkey, dt)] = _expm_hot(Q, dt)
        np.matmul(pi, P, out=buf)
        if cohort.exact_rows[j]:
            for (row, latent) in cohort.exact_rows[j]:
                # density factor: occupancy at t- times intensity into the
                # absorbing phase (paths already inside contribute zero)
                buf[row] *= Q[:, latent]
            mask = np.ones(m, dtype=bool)
            mask[[r for r, _ in cohort.exact_rows[j]]] = False
            buf[mask] *= cohort.emissions[j][mask]
        else:
            buf *= cohort.emissions[j]
        pi, buf = buf, pi
        _renormalise(pi, pi.sum(axis=1), loglik, alive, cohort.ids, j)
    loglik[~alive] = -np.inf
    return loglik


def _renormalise(pi, c, loglik, alive, ids=None, step=None):
    if c.min() > 0.0:  # fast path: every member still has probability mass
        pi /= c[:, None]
        loglik += np.log(c)
        return
    bad = (c <= 0.0) & alive
    if bad.any() and ids is not None:
        for i in np.flatnonzero(bad):
            log.warning("zero-probability path for subject %s at interval %d",
                        ids[i], step + 1)
    alive &= ~bad
    c_safe = np.where(c > 0, c, 1.0)
    pi /= c_safe[:, None]
    loglik += np.where(alive, np.log(c_safe), 0.0)


def loglik_prepared(prepared, qfun):
    """Total forward log-likelihood over prepared cohorts, with the latent
    intensity matrices supplied by ``qfun(xrow, xkey)``."""
    qcache, pcache = {}, {}
    total = 0.0
    for cohort in prepared.cohorts:
        lls = _forward_cohort(cohort, qcache, pcache, qfun)
        s = lls.sum()
        if not np.isfinite(s):
            return -math.inf
        total += s
    return float(total)


def forward_loglik(dataset, spec, layout=None, params=None, outcome=None,
                   prepared=None):
    """Hidden-Markov forward log-likelihood of the panel dataset.

    Initial latent occupancy puts mass on the first phase of the first
    observed state (uniform across a censor set); each subsequent record
    filters by its emission vector; per-step renormalisation accumulates
    the log normalising constants.  Returns -inf (with a logged subject /
    interval diagnostic) when a zero-probability transition occurs.
    """
    if params is None:
        raise TypeError("params is required")
    layout = layout or build_layout(spec)
    if prepared is None:
        prepared = prepare(dataset, spec, layout, outcome)
    return loglik_prepared(
        prepared, lambda xrow, xkey: assemble_Q(params, spec, layout, xrow))


def forward_from_matrices(init, trans, emis):
    """Scaled forward recursion on explicit matrices.

    Diagnostic / verification utility: ``trans`` and ``emis`` are the
    per-interval transition matrices and emission vectors; returns the
    log-probability of the observation sequence.
    """
    pi = np.asarray(init, dtype=float)
    tot = pi.sum()
    if tot <= 0:
        return -math.inf
    ll = math.log(tot)
    pi = pi / tot
    for P, e in zip(trans, emis):
        pi = (pi @ P) * e
        tot = pi.sum()
        if tot <= 0:
            return -math.inf
        ll += math.log(tot)
        pi = pi / tot
    return ll


def markov_loglik(dataset, spec, params):
    """Direct product-of-transition-probabilities log-likelihood.

    Valid only for all-Markov specifications with exact observations;
    serves as the independent oracle for ``forward_loglik``.
    """
    if spec.semi_markov_states:
        raise SpecError("markov_loglik requires an all-Markov specification")
    layout = build_layout(spec)
    dataset.validate_against(spec)
    names = dataset.covariate_names
    pcache, qcache = {}, {}
    total = 0.0
    for s in dataset.subjects:
        for j in range(len(s.times) - 1):
            ob0, ob1 = s.obs[j], s.obs[j + 1]
            if not (ob0.is_exact and ob1.is_exact):
                raise SpecError("markov_loglik requires exact observations")
            x = dict(zip(names, s.covs[j]))
            xkey = tuple(sorted(x.items()))
            dt = s.times[j + 1] - s.times[j]
            Q = qcache.get(xkey)
            if Q is None:
                Q = qcache[xkey] = assemble_Q(params, spec, layout, x)
            P = pcache.get((xkey, dt))
            if P is None:
                P = pcache[(xkey, dt)] = expm(Q, dt)
            r = next(iter(ob0.states))
            to = next(iter(ob1.states))
            if ob1.exact_entry:
                v = P[r] * Q[:, to]
                p = max(v.sum(), 0.0)
            else:
                p = P[r, to]
            if p <= 0:
                log.warning("zero-probability transition for subject %s "
                            "interval %d", s.id, j + 1)
                return -math.inf
            total += math.log(p)
    return float(total)


def subject_posterior_states(subject, spec, layout, params, outcome=None,
                             covariate_names=None):
    """Posterior occupancy probabilities of the observable states at each
    of one subject's observation times (forward-backward smoother on the
    latent space, aggregated over phases).

    ``covariate_names`` labels the subject's covariate columns; it defaults
    to the names used in the model specification, in order.
    """
    outcome = outcome or OutcomeModel(layout)
    names = covariate_names if covariate_names is not None else spec.covariate_names
    J = len(subject.times)
    K = layout.latent_dim
    emis = np.zeros((J, K))
    emis[0] = outcome.initial_distribution(subject.obs[0])
    if outcome.misclass is not None:
        emis[0] *= outcome.emission(subject.obs[0])
    for j in range(1, J):
        emis[j] = outcome.emission(subject.obs[j])
    trans = []
    for j in range(J - 1):
        x = dict(zip(names, subject.covs[j]))
        Q = assemble_Q(params, spec, layout, x)
        trans.append(expm(Q, subject.times[j + 1] - subject.times[j]))
    fwd = np.zeros((J, K))
    fwd[0] = emis[0] / emis[0].sum()
    for j in range(1, J):
        v = (fwd[j - 1] @ trans[j - 1]) * emis[j]
        tot = v.sum()
        if tot <= 0:
            raise DataError(f"subject {subject.id}: zero-probability path "
                            f"at interval {j}")
        fwd[j] = v / tot
    bwd = np.ones((J, K))
    for j in range(J - 2, -1, -1):
        bwd[j] = trans[j] @ (emis[j + 1] * bwd[j + 1])
    post = fwd * bwd
    post /= post.sum(axis=1, keepdims=True)
    parent = np.asarray(layout.parent)
    nstates = len(spec.states)
    out = np.zeros((J, nstates))
    for s in range(nstates):
        out[:, s] = post[:, parent == s].sum(axis=1)
    return out
