"""Acceptance suite: one test per release criterion.

Each test prints a single PASS/FAIL line.  The long calibration studies
carry the ``slow`` marker (run them with ``pytest -m slow``); everything
else executes in the default run.
"""

import math
import os
import time

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import quad

from panelmsm.cli import parse_config, parse_dataset, parse_study
from panelmsm.inference import (
    NormalPrior,
    Posterior,
    elicit_logodds_prior,
    fit_laplace,
    fit_mcmc,
    laplace_draws,
    markov_sojourn_prior_quantiles,
    optimize_map,
)
from panelmsm.likelihood import (
    Observation,
    PanelDataset,
    Subject,
    forward_loglik,
    markov_loglik,
)
from panelmsm.outputs import expected_length_of_stay, observable_P
from panelmsm.phasetype import (
    ShapeScaleSpec,
    moment_bounds_ok,
    normalized_moments,
    pt_cdf,
    pt_moments,
    shape_upper_bound,
    shapescale_to_rates,
)
from panelmsm.simulate import (
    Population,
    SBCConfig,
    Schedule,
    observe_panel,
    prior_predictive_dataset,
    sbc_run,
    simulate_trajectory,
)
from panelmsm.statespace import (
    MarkovStateParams,
    ModelSpec,
    Params,
    SemiMarkovStateParams,
    SojournModel,
    assemble_Q,
    build_layout,
)

EXAMPLES = os.path.join(os.path.dirname(__file__), "..", "src", "panelmsm",
                        "examples")
N_JOBS = 2


def report(name, ok, detail=""):
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'}"
          + (f"  ({detail})" if detail else ""))
    assert ok, f"{name}: {detail}"


def gamma_moments(a):
    return a, a, 2.0 / math.sqrt(a)


def weibull_moments(a):
    from scipy.special import gamma as g
    g1, g2, g3 = g(1 + 1 / a), g(1 + 2 / a), g(1 + 3 / a)
    var = g2 - g1 * g1
    return g1, var, (g3 - 3 * g1 * g2 + 2 * g1**3) / var**1.5


def shape_grid(lo_k, hi):
    ks = np.arange(lo_k, int(math.floor((hi - 0.01) * 100 + 1e-9)) + 1)
    return ks[ks != 100] * 0.01


class TestMomentMatching:
    def test_gamma_grid_bounds_and_roundtrip(self):
        worst = 0.0
        n_checked = 0
        for n in range(2, 11):
            for a in shape_grid(1, float(n)):
                m = normalized_moments("gamma", a)
                if not moment_bounds_ok(m.n2, m.n3, n):
                    report("gamma-moment-grid", False,
                           f"bounds rejected shape {a} at n={n}")
                got = pt_moments(shapescale_to_rates(
                    ShapeScaleSpec("gamma", float(a), 1.0, n)))
                want = gamma_moments(a)
                rel = max(abs(g - w) / abs(w) for g, w in zip(got, want))
                worst = max(worst, rel)
                n_checked += 1
        report("gamma-moment-grid", worst < 1e-8,
               f"{n_checked} shapes, worst relative error {worst:.2e}")

    def test_weibull_shape_bounds(self):
        got = [shape_upper_bound("weibull", n) for n in (2, 5, 10)]
        ok = all(abs(g - w) <= 0.05 for g, w in zip(got, (1.2, 2.0, 3.1)))
        report("weibull-shape-bounds", ok,
               "bounds " + ", ".join(f"{g:.4f}" for g in got))

    def test_weibull_grid_bounds_and_roundtrip(self):
        worst = 0.0
        n_checked = 0
        for n in range(2, 11):
            ub = shape_upper_bound("weibull", n)
            for a in shape_grid(6, ub):
                m = normalized_moments("weibull", a)
                if not moment_bounds_ok(m.n2, m.n3, n):
                    report("weibull-moment-grid", False,
                           f"bounds rejected shape {a} at n={n}")
                got = pt_moments(shapescale_to_rates(
                    ShapeScaleSpec("weibull", float(a), 1.0, n)))
                want = weibull_moments(a)
                rel = max(abs(g - w) / abs(w) for g, w in zip(got, want))
                worst = max(worst, rel)
                n_checked += 1
        report("weibull-moment-grid", worst < 1e-8,
               f"{n_checked} shapes, worst relative error {worst:.2e}")


def random_markov_instance(rng):
    n_states = int(rng.integers(2, 6))
    states = [f"s{i}" for i in range(n_states)]
    allowed = []
    for r in range(n_states):
        for s in range(n_states):
            if r != s and rng.uniform() < 0.6:
                allowed.append((states[r], states[s]))
    if not allowed:
        allowed = [(states[0], states[1])]
    with_cov = rng.uniform() < 0.5
    covs = {pair: ["x"] for pair in allowed if rng.uniform() < 0.5} \
        if with_cov else {}
    spec = ModelSpec(states, allowed, intensity_covariates=covs)
    markov = {}
    for r in states:
        dests = spec.destinations(r)
        if dests:
            markov[r] = MarkovStateParams(
                q0={s: float(rng.uniform(0.2, 1.5)) for s in dests},
                beta={s: {"x": float(rng.normal(0, 0.4))}
                      for s in dests if (r, s) in covs})
    params = Params(markov=markov)
    layout = build_layout(spec)
    from panelmsm.likelihood import OutcomeModel
    outcome = OutcomeModel(layout)
    subjects = []
    n_sub = int(rng.integers(5, 31))
    for i in range(n_sub):
        xval = float(rng.integers(0, 2)) if with_cov else 0.0
        x = {"x": xval} if with_cov else {}
        Q = assemble_Q(params, spec, layout, x)
        start = int(rng.integers(0, n_states))
        times = np.round(np.cumsum(rng.uniform(0.3, 1.5, 4)), 6)
        traj = simulate_trajectory(Q, start, times[-1] + 1.0, rng)
        recs = observe_panel(traj, times, outcome, rng)
        covs_arr = np.full((len(recs), 1 if with_cov else 0), xval)
        subjects.append(Subject(f"p{i}", np.array([t for t, _ in recs]),
                                [ob for _, ob in recs], covs_arr))
    data = PanelDataset(["x"] if with_cov else [], subjects)
    return spec, params, data


class TestOracleEquivalence:
    def test_forward_matches_markov_on_random_instances(self):
        rng = np.random.default_rng(314)
        worst = 0.0
        for _ in range(50):
            spec, params, data = random_markov_instance(rng)
            direct = markov_loglik(data, spec, params)
            fwd = forward_loglik(data, spec, params=params)
            worst = max(worst, abs(direct - fwd))
        report("forward-vs-markov-oracle", worst < 1e-10,
               f"50 instances, worst |diff| {worst:.2e}")

    def test_forward_matches_quadrature_on_semi_markov_toy(self):
        shape = 2.0 - 1e-9
        scale = 1.5
        spec = ModelSpec(["a", "b"], [("a", "b")],
                         sojourn={"a": SojournModel("gamma", 2)})
        params = Params(semi={"a": SemiMarkovStateParams(shape, scale,
                                                         {"b": 1.0})})
        rates = shapescale_to_rates(ShapeScaleSpec("gamma", shape, scale, 2))
        t1, t2 = 1.0, 2.5
        data = PanelDataset([], [Subject(
            "s", [0.0, t1, t2],
            [Observation.exact(0), Observation.exact(0), Observation.exact(1)],
            np.zeros((3, 0)))])
        prog, (exit1, exit2) = rates.prog[0], rates.exit
        r1 = prog + exit1
        direct = (exit1 / r1) * (math.exp(-r1 * t1) - math.exp(-r1 * t2))

        def integrand(u):
            hi = 1.0 - math.exp(-exit2 * (t2 - u))
            lo = 1.0 - math.exp(-exit2 * (t1 - u)) if u < t1 else 0.0
            return prog * math.exp(-r1 * u) * (hi - lo)

        part1, _ = quad(integrand, 0.0, t1)
        part2, _ = quad(integrand, t1, t2)
        want = math.log(direct + part1 + part2)
        got = forward_loglik(data, spec, params=params)
        rel = abs(got - want) / abs(want)
        report("forward-vs-quadrature-oracle", rel < 1e-6,
               f"relative error {rel:.2e}")


class TestDistributionalCorrectness:
    def test_first_passage_ks_100k(self):
        spec = ModelSpec(["a", "b"], [("a", "b")],
                         sojourn={"a": SojournModel("gamma", 5)})
        params = Params(semi={"a": SemiMarkovStateParams(2.0, 1.0, {"b": 1.0})})
        layout = build_layout(spec)
        Q = assemble_Q(params, spec, layout)
        rates = shapescale_to_rates(ShapeScaleSpec("gamma", 2.0, 1.0, 5))
        rng = np.random.default_rng(99)
        n = 100_000
        # vectorised first-passage sampling through the 5-phase chain
        samples = np.zeros(n)
        state = np.zeros(n, dtype=int)
        active = np.ones(n, dtype=bool)
        while active.any():
            rows = Q[state[active]]
            rate = -rows[np.arange(active.sum()), state[active]]
            samples[active] += rng.exponential(1.0 / rate)
            probs = np.clip(rows, 0.0, None)
            probs[np.arange(active.sum()), state[active]] = 0.0
            cum = np.cumsum(probs, axis=1)
            u = rng.uniform(size=active.sum()) * rate
            nxt = (u[:, None] > cum).sum(axis=1)
            state[active] = nxt
            active = state != layout.first_phase["b"]
        grid = np.sort(samples)
        cdf_vals = np.array([pt_cdf(rates, t)
                             for t in np.quantile(grid, np.linspace(0.0005, 0.9995, 2000))])
        emp = np.linspace(0.0005, 0.9995, 2000)
        stat = np.max(np.abs(cdf_vals - emp))
        crit = 1.628 / math.sqrt(n)  # 1% Kolmogorov-Smirnov critical value
        report("first-passage-ks", stat < crit,
               f"KS statistic {stat:.5f} vs 1% critical {crit:.5f}, n={n}")


class TestPriorElicitation:
    def test_sojourn_prior_and_logodds_reproduction(self):
        mu = -5.449
        med, iqr = markov_sojourn_prior_quantiles(
            [NormalPrior(mu, 0.1 * abs(mu)), NormalPrior(mu, 0.5 * abs(mu))],
            n_sims=1_000_000, seed=12)
        ok_med = abs(med - 96.86945) / 96.86945 < 0.05
        ok_iqr = abs(iqr - 150.1167) / 150.1167 < 0.05
        got_sd = elicit_logodds_prior(NormalPrior(mu, 0.1 * abs(mu)),
                                      NormalPrior(mu, 0.5 * abs(mu))).sd
        ok_sd = abs(got_sd - 2.7784557329567083) < 1e-12
        report("prior-elicitation", ok_med and ok_iqr and ok_sd,
               f"median {med:.2f} (target 96.87), iqr {iqr:.1f} "
               f"(target 150.1), sd_logodds {got_sd:.10f}")


class TestLengthOfStay:
    def test_conservation_and_analytic_integral(self):
        spec = ModelSpec(["a", "b", "c"], [("a", "b"), ("a", "c"), ("b", "a")],
                         sojourn={"a": SojournModel("gamma", 4)})
        params = Params(
            markov={"b": MarkovStateParams(q0={"a": 0.4})},
            semi={"a": SemiMarkovStateParams(1.5, 2.0, {"b": 0.7, "c": 0.3})})
        layout = build_layout(spec)
        T = 9.0
        total = expected_length_of_stay(params, spec, layout,
                                        ["a", "b", "c"], T, from_state="a")
        ok_cons = abs(total - T) < 1e-8

        q12, q21, T2 = 0.5, 1.0, 8.0
        spec2 = ModelSpec(["a", "b"], [("a", "b"), ("b", "a")])
        params2 = Params(markov={"a": MarkovStateParams(q0={"b": q12}),
                                 "b": MarkovStateParams(q0={"a": q21})})
        got = expected_length_of_stay(params2, spec2, build_layout(spec2),
                                      ["a"], T2, from_state="a")
        q = q12 + q21
        want = q21 * T2 / q + q12 * (1 - math.exp(-q * T2)) / q**2
        ok_int = abs(got - want) / want < 1e-6
        report("length-of-stay", ok_cons and ok_int,
               f"conservation error {abs(total - T):.2e}, "
               f"analytic relative error {abs(got - want) / want:.2e}")


def run_sbc(config_name, n_reps, method="mcmc", iterations=20000, seed=0,
            time_scale=1.0):
    study = parse_study(os.path.join(EXAMPLES, config_name))
    config = SBCConfig(
        study.spec, n_reps, study.population, study.schedule,
        estimands=study.sbc.get("estimands"), method=method,
        n_draws=int(study.sbc.get("draws", 100)), mcmc_iter=iterations,
        seed=seed, exact_absorbing=study.exact_death,
        fit_time_scale=time_scale, n_jobs=N_JOBS)
    return sbc_run(config)


class TestSBCSmoke:
    def test_markov_sbc_smoke_under_20_minutes(self):
        t0 = time.perf_counter()
        result = run_sbc("model_a.yaml", 50, seed=2024)
        elapsed = time.perf_counter() - t0
        n_ok = int(sum(result.converged))
        pvals = {k: v["chi2_pvalue"] for k, v in result.uniformity.items()}
        ok = elapsed < 1200 and n_ok >= 45 and all(
            p > 1e-4 for p in pvals.values())
        report("sbc-markov-smoke", ok,
               f"{elapsed:.0f}s for 50 replicates, {n_ok} converged, "
               f"min p {min(pvals.values()):.4f}")


@pytest.mark.slow
class TestSBCFull:
    def test_markov_sbc_uniformity_200(self):
        result = run_sbc("model_a.yaml", 200, seed=77)
        pvals = {k: v["chi2_pvalue"] for k, v in result.uniformity.items()}
        n_ok = int(sum(result.converged))
        ok = n_ok >= 180 and all(p > 0.01 for p in pvals.values())
        report("sbc-markov-200", ok,
               f"{n_ok}/200 converged; chi2 p-values "
               + ", ".join(f"{k}={v:.3f}" for k, v in pvals.items()))

    def test_markov_sbc_negative_control_rejected(self):
        # corrupted likelihood: observation intervals doubled at fit time
        result = run_sbc("model_a.yaml", 100, seed=78, time_scale=2.0)
        pvals = [result.uniformity[k]["chi2_pvalue"]
                 for k in ("q(well,ill)", "q(ill,well)")]
        ok = min(pvals) < 0.01
        report("sbc-negative-control", ok,
               f"intensity chi2 p-values {pvals[0]:.2e}, {pvals[1]:.2e}")

    def test_semi_markov_sbc_uniformity_200(self):
        result = run_sbc("model_b.yaml", 200, seed=79, iterations=24000)
        pvals = {k: v["chi2_pvalue"] for k, v in result.uniformity.items()}
        n_ok = int(sum(result.converged))
        ok = n_ok >= 170 and all(p > 0.01 for p in pvals.values())
        report("sbc-semi-markov-200", ok,
               f"{n_ok}/200 converged; chi2 p-values "
               + ", ".join(f"{k}={v:.3f}" for k, v in pvals.items()))


@pytest.mark.slow
class TestCognitivePipeline:
    def test_21_latent_laplace_under_30_minutes(self):
        data = parse_dataset(os.path.join(EXAMPLES, "cognitive_sim.csv"))
        t0 = time.perf_counter()
        lps = {}
        converged = {}
        for family in ("gamma", "weibull"):
            spec = parse_config(os.path.join(EXAMPLES,
                                             f"cognitive_{family}.yaml"))
            fit = fit_laplace(data, spec, n_draws=1000, seed=5)
            lps[family] = fit.log_posterior_at_map
            converged[family] = fit.converged
        elapsed = time.perf_counter() - t0
        diff = abs(lps["gamma"] - lps["weibull"])
        ok = elapsed < 1800 and all(converged.values()) and diff < 50
        report("cognitive-21-latent-pipeline", ok,
               f"{elapsed:.0f}s; log posterior gamma {lps['gamma']:.1f} vs "
               f"weibull {lps['weibull']:.1f} (|diff| {diff:.1f}); "
               f"converged {converged}")

    def test_laplace_bias_tendency_50_pairs(self):
        # paired Laplace / MCMC fits of a small 5-phase Weibull model: the
        # Laplace median log-shape tends to overestimate and its IQR tends
        # to understate posterior spread
        spec = ModelSpec(
            ["well", "ill"], [("well", "ill"), ("ill", "well")],
            sojourn={"well": SojournModel("weibull", 5)},
            priors={"shape(well)": NormalPrior(0.0, 0.35, lower=math.log(0.2),
                                               upper=math.log(2.013)),
                    "scale(well)": NormalPrior(1.8, 0.6),
                    "q(ill,well)": NormalPrior(0.8, 0.4)})
        pop = Population([(100, {})])
        sched = Schedule.regular(0, 1, 12)
        med_diffs, iqr_diffs = [], []
        rng_root = np.random.SeedSequence(4242)
        for i, ss in enumerate(rng_root.spawn(50)):
            s1, s2 = ss.spawn(2)
            truth, data = prior_predictive_dataset(spec, pop, sched, s1)
            post = Posterior(None, spec)
            ishape = post.names.index("shape(well)")

            def med_iqr(draws):
                loga = np.array([math.log(post.untransform(v)
                                          .semi["well"].shape)
                                 for v in draws])
                q25, q50, q75 = np.quantile(loga, [0.25, 0.5, 0.75])
                return q50, q75 - q25

            seed = int(np.random.default_rng(s2).integers(2**31))
            try:
                lap = fit_laplace(data, spec, n_draws=500, seed=seed)
                mc = fit_mcmc(data, spec, n_iter=9000, seed=seed)
            except Exception:
                continue
            lmed, liqr = med_iqr(lap.draws)
            mmed, miqr = med_iqr(mc.draws[::20])
            med_diffs.append(lmed - mmed)
            iqr_diffs.append(liqr - miqr)
        med_bias = float(np.median(med_diffs))
        iqr_bias = float(np.median(iqr_diffs))
        ok = len(med_diffs) >= 40 and med_bias > 0 and iqr_bias < 0
        report("laplace-bias-tendency", ok,
               f"{len(med_diffs)} pairs; median log-shape bias {med_bias:+.4f} "
               f"(expect >0), median IQR bias {iqr_bias:+.4f} (expect <0)")
