import math

import numpy as np
import pytest

from panelmsm.errors import SpecError
from panelmsm.phasetype import ShapeScaleSpec, pt_cdf, shapescale_to_rates
from panelmsm.statespace import (
    MarkovStateParams,
    ModelSpec,
    Params,
    SemiMarkovStateParams,
    SojournModel,
    assemble_Q,
    build_layout,
    next_state_probs,
)


@pytest.fixture
def living_dead_spec():
    # four 5-phase living states plus death
    states = [f"c{i}" for i in range(1, 5)] + ["dead"]
    allowed = [("c1", "c2"), ("c2", "c1"), ("c2", "c3"), ("c3", "c2"),
               ("c3", "c4"), ("c4", "c3")] + [(f"c{i}", "dead") for i in range(1, 5)]
    sojourn = {f"c{i}": SojournModel("weibull", 5) for i in range(1, 5)}
    return ModelSpec(states, allowed, sojourn=sojourn)


@pytest.fixture
def mixed_spec():
    return ModelSpec(
        states=["a", "b", "c"],
        allowed=[("a", "b"), ("b", "a"), ("b", "c")],
        sojourn={"a": SojournModel("weibull", 5)},
    )


class TestBuildLayout:
    def test_elsa_shape_gives_21_latent_states(self, living_dead_spec):
        assert build_layout(living_dead_spec).latent_dim == 21

    def test_two_markov_states_identity_layout(self):
        spec = ModelSpec(["a", "b"], [("a", "b"), ("b", "a")])
        lay = build_layout(spec)
        assert lay.latent_dim == 2
        assert lay.first_phase == {"a": 0, "b": 1}
        assert lay.parent == (0, 1)

    def test_mixed_layout_hand_enumerated(self, mixed_spec):
        lay = build_layout(mixed_spec)
        assert lay.latent_dim == 7
        assert lay.first_phase["a"] == 0
        assert list(lay.phases_of("a")) == [0, 1, 2, 3, 4]
        assert list(lay.phases_of("b")) == [5]
        assert list(lay.phases_of("c")) == [6]
        assert lay.parent == (0, 0, 0, 0, 0, 1, 2)

    def test_invalid_specs_rejected(self):
        with pytest.raises(SpecError, match="absorbing"):
            ModelSpec(["a", "b"], [("a", "b")], sojourn={"b": SojournModel("gamma", 3)})
        with pytest.raises(SpecError, match="unknown state"):
            ModelSpec(["a"], [("a", "z")])
        with pytest.raises(SpecError, match="disallowed"):
            ModelSpec(["a", "b"], [("a", "b")],
                      intensity_covariates={("b", "a"): ["x"]})


def two_dest_params(p_c=0.3, lor_c=None):
    semi = SemiMarkovStateParams(
        shape=1.5, scale=1.0, next_probs={"b": 1.0 - p_c, "c": p_c},
        lor={"c": lor_c or {}})
    return Params(markov={"b": MarkovStateParams(q0={"a": 0.5, "c": 0.2})},
                  semi={"a": semi})


class TestNextStateProbs:
    def test_single_destination(self):
        spec = ModelSpec(["a", "b"], [("a", "b")],
                         sojourn={"a": SojournModel("gamma", 3)})
        params = Params(semi={"a": SemiMarkovStateParams(2.0, 1.0, {"b": 1.0})})
        np.testing.assert_array_equal(
            next_state_probs(params, spec, "a", {"x": 5.0}), [1.0])

    def test_baseline_recovered_at_zero(self):
        spec = ModelSpec(["a", "b", "c"], [("a", "b"), ("a", "c")],
                         sojourn={"a": SojournModel("gamma", 3)})
        params = two_dest_params(p_c=0.2)
        np.testing.assert_allclose(
            next_state_probs(params, spec, "a", {}), [0.8, 0.2], rtol=1e-14)

    def test_two_category_softmax_by_hand(self):
        spec = ModelSpec(["a", "b", "c"], [("a", "b"), ("a", "c")],
                         sojourn={"a": SojournModel("gamma", 3)},
                         odds_covariates={"a": ["x"]})
        params = two_dest_params(p_c=0.5, lor_c={"x": math.log(2.0)})
        got = next_state_probs(params, spec, "a", {"x": 1.0})
        np.testing.assert_allclose(got, [1 / 3, 2 / 3], rtol=1e-14)


class TestAssembleQ:
    def test_all_markov_baseline(self):
        spec = ModelSpec(["a", "b"], [("a", "b"), ("b", "a")])
        params = Params(markov={"a": MarkovStateParams(q0={"b": 0.7}),
                                "b": MarkovStateParams(q0={"a": 1.1})})
        Q = assemble_Q(params, spec, build_layout(spec))
        np.testing.assert_allclose(Q, [[-0.7, 0.7], [1.1, -1.1]])

    def test_common_acceleration_factor(self):
        # single destination, no odds effects: x scales every row rate
        spec = ModelSpec(["a", "b"], [("a", "b")],
                         sojourn={"a": SojournModel("gamma", 4)},
                         scale_covariates={"a": ["x"]})
        params = Params(semi={"a": SemiMarkovStateParams(
            2.0, 1.5, {"b": 1.0}, aft={"x": 0.4})})
        lay = build_layout(spec)
        Q0 = assemble_Q(params, spec, lay, {"x": 0.0})
        Q1 = assemble_Q(params, spec, lay, {"x": 1.0})
        live = slice(0, 4)
        np.testing.assert_allclose(Q1[live], Q0[live] * math.exp(0.4), rtol=1e-12)

    def test_exit_split_arithmetic(self):
        # 3-phase state, dests (b, c) with p = (0.7, 0.3); chain scaled so
        # the phase-1 exit rate is 2 -> rates into b, c are 1.4 and 0.6
        spec = ModelSpec(["a", "b", "c"], [("a", "b"), ("a", "c")],
                         sojourn={"a": SojournModel("gamma", 3)})
        params = Params(semi={"a": SemiMarkovStateParams(
            0.8, 1.0, {"b": 0.7, "c": 0.3})})
        lay = build_layout(spec)
        rates = shapescale_to_rates(ShapeScaleSpec("gamma", 0.8, 1.0, 3))
        scale_fix = 2.0 / rates.exit[0]
        params.semi["a"].scale = 1.0 / scale_fix
        Q = assemble_Q(params, spec, lay)
        assert Q[0, lay.first_phase["b"]] == pytest.approx(1.4, rel=1e-12)
        assert Q[0, lay.first_phase["c"]] == pytest.approx(0.6, rel=1e-12)
        total_exit = Q[0, lay.first_phase["b"]] + Q[0, lay.first_phase["c"]]
        assert total_exit == pytest.approx(2.0, rel=1e-12)

    def test_rows_sum_to_zero_and_offdiag_nonneg(self, living_dead_spec):
        rng = np.random.default_rng(3)
        spec = living_dead_spec
        lay = build_layout(spec)
        semi = {}
        for r in spec.semi_markov_states:
            dests = spec.destinations(r)
            w = rng.uniform(0.5, 2.0, len(dests))
            semi[r] = SemiMarkovStateParams(
                shape=float(rng.uniform(0.5, 1.9)),
                scale=float(rng.uniform(0.5, 4.0)),
                next_probs=dict(zip(dests, w / w.sum())))
        Q = assemble_Q(Params(semi=semi), spec, lay)
        np.testing.assert_allclose(Q.sum(axis=1), 0.0, atol=1e-12)
        off = Q - np.diag(np.diag(Q))
        assert (off >= 0).all()
        # absorbing row is zero
        np.testing.assert_array_equal(Q[lay.first_phase["dead"]], 0.0)

    def test_covariate_free_model_ignores_x(self, mixed_spec):
        params = two_dest_params()
        lay = build_layout(mixed_spec)
        Q0 = assemble_Q(params, mixed_spec, lay, {})
        Q1 = assemble_Q(params, mixed_spec, lay, {"x": 3.0, "y": -2.0})
        np.testing.assert_array_equal(Q0, Q1)

    def test_single_destination_first_passage_is_sojourn_cdf(self):
        # first-passage time from the entry phase to the destination under
        # the assembled Q has cdf equal to pt_cdf of the matched chain
        from scipy.linalg import expm
        spec = ModelSpec(["a", "b"], [("a", "b")],
                         sojourn={"a": SojournModel("weibull", 5)})
        params = Params(semi={"a": SemiMarkovStateParams(1.4, 2.0, {"b": 1.0})})
        lay = build_layout(spec)
        Q = assemble_Q(params, spec, lay)
        rates = shapescale_to_rates(ShapeScaleSpec("weibull", 1.4, 2.0, 5))
        for t in (0.3, 1.0, 2.5, 7.0):
            reach = expm(Q * t)[lay.first_phase["a"], lay.first_phase["b"]]
            assert reach == pytest.approx(pt_cdf(rates, t), abs=1e-12)

    def test_first_jump_marginal_matches_baseline_probs(self):
        # Monte-Carlo: the first observable jump from r lands in s_j with
        # probability p_{r,s_j} regardless of the exit phase
        spec = ModelSpec(["a", "b", "c"], [("a", "b"), ("a", "c")],
                         sojourn={"a": SojournModel("gamma", 3)})
        p_c = 0.3
        params = Params(semi={"a": SemiMarkovStateParams(
            2.5, 1.0, {"b": 1 - p_c, "c": p_c})})
        lay = build_layout(spec)
        Q = assemble_Q(params, spec, lay)
        rng = np.random.default_rng(11)
        n = 40000
        hits_c = 0
        for _ in range(n):
            state = lay.first_phase["a"]
            while state in lay.phases_of("a"):
                rates = Q[state].copy()
                rates[state] = 0.0
                tot = rates.sum()
                state = rng.choice(len(rates), p=rates / tot)
            hits_c += state == lay.first_phase["c"]
        se = math.sqrt(p_c * (1 - p_c) / n)
        assert abs(hits_c / n - p_c) < 3.5 * se
