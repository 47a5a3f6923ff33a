"""Trajectory simulation, prior-predictive datasets, and simulation-based
calibration.

Latent trajectories are simulated exactly (event-driven, exponential
competing risks); panel observations read the occupied observable state at
scheduled times.  The calibration harness draws parameters from the prior,
simulates a dataset, fits it, and ranks the truth among the posterior
draws: correct computation makes the ranks uniform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ConvergenceError, LaplaceError, SpecError
from .inference import (
    Posterior,
    fit_laplace,
    fit_mcmc,
    optimize_map,
    thin_draws,
)
from .likelihood import Observation, OutcomeModel, PanelDataset, Subject
from .statespace import assemble_Q, build_layout

#: Lag-1 autocorrelation ceiling for thinned MCMC draws used in ranks.
SBC_LAG1_LIMIT = 0.2


@dataclass
class Trajectory:
    """Latent jump chain: (entry time, latent state) pairs, ending at an
    absorbing state or at the horizon."""

    jumps: list
    horizon: float
    absorbed: bool

    def state_at(self, t):
        state = self.jumps[0][1]
        for (tj, sj) in self.jumps:
            if tj > t:
                break
            state = sj
        return state

    @property
    def absorption_time(self):
        return self.jumps[-1][0] if self.absorbed else None


def simulate_trajectory(Q, start, horizon, rng):
    """Exact event-driven simulation of the latent chain from ``start``.

    Sojourns are exponential with the row's total rate; destinations drawn
    proportionally to the off-diagonal intensities.
    """
    Q = np.asarray(Q, dtype=float)
    jumps = [(0.0, int(start))]
    t, state = 0.0, int(start)
    while True:
        rate = -Q[state, state]
        if rate <= 0.0:
            return Trajectory(jumps, horizon, absorbed=True)
        t += rng.exponential(1.0 / rate)
        if t >= horizon:
            return Trajectory(jumps, horizon, absorbed=False)
        probs = Q[state].copy()
        probs[state] = 0.0
        state = int(rng.choice(len(probs), p=probs / rate))
        jumps.append((t, state))


@dataclass(frozen=True)
class Schedule:
    """Observation times shared by all simulated subjects."""

    times: tuple

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if len(t) < 2 or np.any(np.diff(t) <= 0):
            raise SpecError("schedule needs at least two strictly "
                            "increasing times")

    @classmethod
    def regular(cls, start, step, count):
        return cls(tuple(start + step * i for i in range(count)))

    @property
    def horizon(self):
        return self.times[-1]


@dataclass
class Population:
    """Covariate composition of a simulated cohort: explicit group counts
    plus the initial observable state (one name, or a distribution)."""

    groups: list                       # (count, {covariate: value}) pairs
    initial_state: object = None       # state name or {name: prob}

    @property
    def size(self):
        return sum(n for n, _ in self.groups)

    def initial_distribution(self, spec):
        if self.initial_state is None:
            return {spec.states[0]: 1.0}
        if isinstance(self.initial_state, str):
            return {self.initial_state: 1.0}
        return dict(self.initial_state)


def observe_panel(traj, times, outcome, rng, exact_absorbing=False):
    """Panel records for one trajectory: (time, Observation) pairs.

    The occupied observable state is read at each time (misclassified when
    the outcome model says so).  With ``exact_absorbing`` the absorption
    time is emitted as an exactly-timed record, replacing the remaining
    scheduled visits.
    """
    records = []
    absorbed_at = traj.absorption_time
    for t in times:
        if exact_absorbing and absorbed_at is not None and absorbed_at <= t:
            # first visit at or after absorption: emit the exact entry time
            # (necessarily later than every previously scheduled record)
            s = outcome.layout.parent[traj.state_at(absorbed_at)]
            records.append((float(absorbed_at),
                            Observation.exact_absorbing(int(s))))
            break
        latent = traj.state_at(t)
        records.append((float(t),
                        Observation.exact(outcome.sample_observed(latent, rng))))
    return records


def prior_predictive_dataset(spec, population, schedule, seed, outcome=None,
                             exact_absorbing=False, max_retries=100):
    """Parameters drawn from the declared priors plus a dataset simulated
    under them.  Returns (params, PanelDataset)."""
    rng = np.random.default_rng(seed)
    layout = build_layout(spec)
    outcome = outcome or OutcomeModel(layout)
    post = Posterior(None, spec)
    for _ in range(max_retries):
        try:
            v = post.sample_prior(rng)
            params = post.untransform(v)
            break
        except SpecError:
            raise
        except (OverflowError, ValueError):
            continue
    else:
        raise ConvergenceError("could not draw valid parameters from the prior")
    covariate_names = spec.covariate_names
    init_dist = population.initial_distribution(spec)
    init_names = sorted(init_dist, key=spec.state_index)
    init_probs = np.array([init_dist[k] for k in init_names])
    init_probs = init_probs / init_probs.sum()
    subjects = []
    sid = 0
    for count, xmap in population.groups:
        x = dict(xmap)
        Q = assemble_Q(params, spec, layout, x)
        xrow = np.array([x.get(c, 0.0) for c in covariate_names])
        for _ in range(count):
            name = init_names[rng.choice(len(init_names), p=init_probs)]
            traj = simulate_trajectory(Q, layout.first_phase[name],
                                       schedule.horizon + 1e-9, rng)
            records = observe_panel(traj, schedule.times, outcome, rng,
                                    exact_absorbing=exact_absorbing)
            times = np.array([t for t, _ in records])
            obs = [ob for _, ob in records]
            covs = np.tile(xrow, (len(records), 1))
            subjects.append(Subject(f"s{sid:04d}", times, obs, covs))
            sid += 1
    return params, PanelDataset(list(covariate_names), subjects)


# -- simulation-based calibration -------------------------------------------

@dataclass
class SBCConfig:
    """One calibration study: model, replicate count, cohort design,
    estimands, fitting method and budgets."""

    spec: object
    n_replicates: int
    population: Population
    schedule: Schedule
    estimands: list = None             # coordinate names; default: all
    method: str = "mcmc"               # mcmc | laplace | prior
    n_draws: int = 100                 # posterior draws ranked against
    mcmc_iter: int = 16000
    mcmc_warmup: int = None
    seed: int = 0
    exact_absorbing: bool = False
    fit_time_scale: float = 1.0        # != 1 corrupts the fitted likelihood
    n_jobs: int = 1

    def __post_init__(self):
        if self.method not in ("mcmc", "laplace", "prior"):
            raise SpecError(f"unknown SBC method {self.method!r}")
        if self.n_replicates < 1:
            raise SpecError("need at least one replicate")


@dataclass
class SBCResult:
    estimands: list
    ranks: np.ndarray          # (n_replicates, n_estimands), -1 when failed
    converged: np.ndarray      # (n_replicates,) bool
    statuses: list             # per replicate: "ok" or a failure tag
    n_draws: int
    uniformity: dict = field(default_factory=dict)

    def rank_rows(self):
        rows = []
        for i in range(len(self.ranks)):
            for j, name in enumerate(self.estimands):
                rows.append((i, name, int(self.ranks[i, j]),
                             bool(self.converged[i])))
        return rows


def _chi2_uniformity(ranks, n_draws, n_bins=20):
    """Chi-squared test of rank uniformity on n_bins bins with exact
    per-bin expected counts (the L+1 rank values need not split evenly)."""
    L = n_draws
    values = L + 1
    edges = np.floor(np.arange(n_bins + 1) * values / n_bins).astype(int)
    counts = np.array([((ranks >= edges[b]) & (ranks < edges[b + 1])).sum()
                       for b in range(n_bins)])
    expected = len(ranks) * np.diff(edges) / values
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    pvalue = float(stats.chi2.sf(chi2, n_bins - 1))
    return chi2, pvalue


def _ks_uniformity(ranks, n_draws):
    u = (ranks + 0.5) / (n_draws + 1)
    res = stats.kstest(u, "uniform")
    return float(res.statistic), float(res.pvalue)


def _replicate_seed_pair(seed, i):
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(i,))
    return ss.spawn(2)


def _run_replicate(config, i, names):
    """(ranks_row, status) for replicate i; isolated for parallel runs."""
    sim_seed, fit_seed = _replicate_seed_pair(config.seed, i)
    spec = config.spec
    try:
        truth, data = prior_predictive_dataset(
            spec, config.population, config.schedule, sim_seed,
            exact_absorbing=config.exact_absorbing)
    except (ConvergenceError, SpecError) as exc:
        return None, f"simulation-failed: {exc}"
    post = Posterior(None, spec)
    v_true = post.transform(truth)
    idx = [post.names.index(n) for n in names]
    rng = np.random.default_rng(fit_seed)
    try:
        if config.method == "prior":
            # null harness: fresh prior draws are ranked instead of a fit;
            # uniform by construction, validating the rank machinery
            draws = np.stack([post.sample_prior(rng)
                              for _ in range(config.n_draws)])
            status = "ok"
        elif config.method == "laplace":
            fit = fit_laplace(data, spec, n_draws=config.n_draws,
                              seed=int(rng.integers(2**31)),
                              time_scale=config.fit_time_scale)
            draws = fit.draws
            status = "ok" if fit.converged else "not-converged"
        else:
            fit = fit_mcmc(data, spec, n_iter=config.mcmc_iter,
                           seed=int(rng.integers(2**31)),
                           warmup=config.mcmc_warmup,
                           time_scale=config.fit_time_scale)
            draws, lag1 = _thin_for_ranks(fit.draws, config.n_draws)
            status = "ok" if fit.diagnostics.get("rhat_max", np.inf) < 1.1 \
                else "not-converged"
            if lag1 > SBC_LAG1_LIMIT:
                status = "high-autocorrelation"
    except (LaplaceError, ConvergenceError, ValueError) as exc:
        return None, f"fit-failed: {type(exc).__name__}"
    row = np.empty(len(names), dtype=int)
    for j, k in enumerate(idx):
        col = draws[:, k]
        below = int((col < v_true[k]).sum())
        ties = int((col == v_true[k]).sum())
        row[j] = below + (int(rng.integers(0, ties + 1)) if ties else 0)
    return row, status


def _thin_for_ranks(draws, n_target):
    thinned, _ = thin_draws(draws, n_target)
    lag1 = 0.0
    for j in range(thinned.shape[1]):
        x = thinned[:, j] - thinned[:, j].mean()
        denom = float(x @ x)
        if denom > 0:
            lag1 = max(lag1, abs(float(x[:-1] @ x[1:]) / denom))
    return thinned, lag1


def sbc_run(config):
    """Run the calibration study and assess rank uniformity per estimand.

    Ranks from non-converged fits are recorded with their status and
    excluded from the uniformity tests, never dropped silently.
    """
    spec = config.spec
    post = Posterior(None, spec)
    names = list(config.estimands or post.names)
    for n in names:
        if n not in post.names:
            raise SpecError(f"unknown estimand {n!r}")
    indices = range(config.n_replicates)
    if config.n_jobs != 1:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=config.n_jobs)(
            delayed(_run_replicate)(config, i, names) for i in indices)
    else:
        results = [_run_replicate(config, i, names) for i in indices]
    ranks = np.full((config.n_replicates, len(names)), -1, dtype=int)
    statuses = []
    converged = np.zeros(config.n_replicates, dtype=bool)
    for i, (row, status) in enumerate(results):
        statuses.append(status)
        if row is not None:
            ranks[i] = row
            converged[i] = status == "ok"
    result = SBCResult(names, ranks, converged, statuses, config.n_draws)
    for j, name in enumerate(names):
        good = ranks[converged, j]
        if len(good) >= 20:
            chi2, chi2_p = _chi2_uniformity(good, config.n_draws)
            ks, ks_p = _ks_uniformity(good, config.n_draws)
        else:
            chi2 = chi2_p = ks = ks_p = float("nan")
        result.uniformity[name] = dict(
            chi2=chi2, chi2_pvalue=chi2_p, ks=ks, ks_pvalue=ks_p,
            n_converged=int(len(good)))
    return result
