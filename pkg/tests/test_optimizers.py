from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fluxcal.optimizers import (
    EvaluationHistory,
    GpModel,
    OptimizationAborted,
    OptimizerConfig,
    SpsaState,
    expected_improvement,
    gp_posterior,
    optimize,
    propose_next,
    spsa_gradient,
    spsa_step,
    within_bounds,
)


def quad(center):
    c = np.asarray(center, dtype=float)
    return lambda x: 1.0 - float(np.sum((np.asarray(x) - c) ** 2))


def test_bayes_finds_analytic_optimum():
    # hyperparameters matched to the quadratic: it varies on the box scale and
    # changes by less than the default noise level within 0.1 of its optimum
    cfg = OptimizerConfig.box(2, 0.2, n_total=60, seed=0, length_scale=0.1, noise_std=1e-4)
    best, hist = optimize(quad([0.05, 0.05]), cfg)
    assert np.linalg.norm(best - 0.05) < 0.01
    assert len(hist) == 60


def test_constant_objective_uses_whole_budget():
    cfg = OptimizerConfig.box(2, 0.2, n_total=30)
    best, hist = optimize(lambda x: 0.5, cfg)
    assert len(hist) == 30
    assert within_bounds([best], cfg.bounds)


def test_budget_one_returns_the_single_point():
    cfg = OptimizerConfig.box(2, 0.2, n_init=1, n_total=1)
    best, hist = optimize(quad([0, 0]), cfg)
    assert len(hist) == 1
    np.testing.assert_array_equal(best, hist.evaluations[0].params)


def test_zero_dimensional_problem():
    best, hist = optimize(lambda x: 0.7, OptimizerConfig(bounds=[], n_init=0, n_total=5))
    assert best.size == 0 and len(hist) == 1


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig.box(2, n_init=30, n_total=20)
    with pytest.raises(ValueError):
        OptimizerConfig(bounds=[(0.1, 0.1)])
    with pytest.raises(ValueError):
        OptimizerConfig(bounds=[(0, math.inf)])
    with pytest.raises(ValueError):
        OptimizerConfig.box(1, algorithm="grid")


def test_abort_keeps_partial_history():
    calls = []

    def f(x):
        calls.append(x)
        if len(calls) == 4:
            raise RuntimeError("device lost")
        return 0.0

    with pytest.raises(OptimizationAborted) as info:
        optimize(f, OptimizerConfig.box(2, n_init=5, n_total=10))
    assert len(info.value.history) == 3
    with pytest.raises(OptimizationAborted):
        optimize(lambda x: math.nan, OptimizerConfig.box(2, n_init=5, n_total=10))


def test_history_jsonl_round_trip():
    h = EvaluationHistory()
    h.append([0.1, -0.2], 0.5)
    h.append([0.0, 0.3], 0.75, 12.5)
    text = h.to_jsonl()
    assert len(text.strip().splitlines()) == 2
    back = EvaluationHistory.from_jsonl(text)
    assert back.evaluations == h.evaluations


def test_gp_interpolates_single_point():
    m = GpModel(0.1, 0.5, 0.0).fit([[0.3]], [0.8])
    mean, var = gp_posterior(m, [0.3])
    assert mean == pytest.approx(0.8, abs=1e-12)
    assert var == pytest.approx(0.0, abs=1e-12)


def test_gp_reverts_to_prior_far_away():
    m = GpModel(0.02, 0.5, 0.01, prior_mean=-1.0).fit([[0.0], [0.01]], [0.9, 0.95])
    mean, var = gp_posterior(m, [0.2])
    assert mean == pytest.approx(-1.0, abs=1e-12)
    assert var == pytest.approx(0.25, abs=1e-12)


def test_gp_matches_dense_formula():
    X = np.array([[0.0], [0.03], [0.07]])
    y = np.array([0.2, 0.9, 0.4])
    ell, sf, sn, mu0 = 0.04, 0.5, 0.01, 0.1
    m = GpModel(ell, sf, sn, mu0).fit(X, y)
    q = np.array([[0.01], [0.05], [0.2]])

    def k(a, b):
        return sf**2 * np.exp(-0.5 * (a - b.T) ** 2 / ell**2)

    K = k(X, X) + sn**2 * np.eye(3)
    Ks = k(q, X)
    mean = mu0 + Ks @ np.linalg.inv(K) @ (y - mu0)
    var = sf**2 - np.einsum("ij,jk,ik->i", Ks, np.linalg.inv(K), Ks)
    got_mean, got_var = m.posterior(q)
    np.testing.assert_allclose(got_mean, mean, atol=1e-10)
    np.testing.assert_allclose(got_var, var, atol=1e-10)


def test_gp_jitter_on_duplicate_points():
    m = GpModel(0.05, 0.5, 0.0).fit([[0.1], [0.1]], [0.3, 0.3])
    assert gp_posterior(m, [0.1])[0] == pytest.approx(0.3, abs=1e-6)


@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(2, 12))
def test_gp_variance_at_training_inputs(seed, dim, n):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-0.2, 0.2, (n, dim))
    y = rng.uniform(-1, 1, n)
    m = GpModel(0.05, 0.5, 0.01).fit(X, y)
    _, var = m.posterior(X)
    assert np.all(var >= 0)
    assert np.all(var <= 0.01**2 + 1e-12)


def test_expected_improvement_examples():
    assert expected_improvement(0.2, 0.0, 0.5) == 0.0
    assert expected_improvement(0.5, 1.0, 0.5) == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-12)
    assert expected_improvement(0.5, 1.0, 0.5) == pytest.approx(0.39894, abs=1e-5)


@given(st.floats(-2, 2), st.floats(0, 4), st.floats(-2, 2))
def test_expected_improvement_non_negative(mu, var, best):
    assert expected_improvement(mu, var, best) >= 0.0


def test_propose_tie_breaks_by_index():
    class Flat:
        def posterior(self, x):
            return np.zeros(len(x)), np.ones(len(x))

    h = EvaluationHistory()
    h.append([0.0], 0.0)
    bounds = [(-0.2, 0.2)]
    x = propose_next(Flat(), h, bounds, np.random.default_rng(3), n_candidates=16)
    first = -0.2 + 0.4 * np.random.default_rng(3).random((16, 1))[0]
    np.testing.assert_array_equal(x, first)


def test_propose_stays_in_bounds():
    rng = np.random.default_rng(0)
    X = rng.uniform(-0.2, 0.2, (5, 1))
    h = EvaluationHistory()
    for x in X:
        h.append(x, quad([0.1])(x))
    m = GpModel(0.05).fit(h.inputs(), h.values())
    for k in range(10):
        p = propose_next(m, h, [(-0.2, 0.2)], np.random.default_rng(k), 64, 16, 0.5)
        assert -0.2 <= p[0] <= 0.2


@given(st.integers(0, 10_000), st.integers(1, 4), st.floats(1e-3, 0.1))
def test_spsa_gradient_exact_for_linear(seed, dim, ck):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=dim)
    x = rng.uniform(-1, 1, dim)
    delta = rng.choice([-1.0, 1.0], size=dim)
    est, _, _ = spsa_gradient(lambda v: float(g @ v) + 3.0, x, ck, delta)
    # the two-sided difference recovers g projected on delta; with +-1 entries
    # this is g . delta / delta_k, which equals g only in one dimension
    expected = (g @ delta) / delta
    np.testing.assert_allclose(est, expected, rtol=1e-9, atol=1e-12)
    if dim == 1:
        np.testing.assert_allclose(est, g, rtol=1e-9)


def test_spsa_converges_on_quadratic():
    # default gains contract the distance by about exp(-2 * sum a_k) = 0.37 over
    # 100 steps, so the start must lie within ~0.05 of the optimum
    x_star = np.array([0.03, -0.02])
    f = quad(x_star)
    rng = np.random.default_rng(0)
    lo, hi = np.full(2, -0.2), np.full(2, 0.2)
    state = SpsaState(np.zeros(2))
    for _ in range(100):
        state = spsa_step(state, f, rng, lo, hi)
    assert np.linalg.norm(state.x - x_star) < 0.02


def test_spsa_gain_validation():
    with pytest.raises(ValueError):
        SpsaState(np.zeros(1), a=0.0)


@given(st.integers(0, 1000), st.sampled_from(["bayes", "spsa"]))
def test_all_evaluations_in_bounds_and_best_monotone(seed, algorithm):
    cfg = OptimizerConfig(bounds=[(-0.1, 0.2), (-0.3, 0.05)], n_init=5 if algorithm == "bayes" else 0,
                          n_total=15, seed=seed, algorithm=algorithm, n_candidates=64, spsa_a=5.0)
    _, hist = optimize(quad([0.5, -0.5]), cfg)
    assert within_bounds(hist.inputs(), cfg.bounds)
    best = hist.best_so_far()
    assert all(b2 >= b1 for b1, b2 in zip(best, best[1:]))


@pytest.mark.parametrize("algorithm", ["bayes", "spsa"])
def test_optimize_is_reproducible(algorithm):
    cfg = OptimizerConfig.box(2, 0.2, n_init=5, n_total=25, seed=11, algorithm=algorithm, n_polish=5 if algorithm == "bayes" else 0)
    a = optimize(quad([0.03, 0.01]), cfg)[1]
    b = optimize(quad([0.03, 0.01]), cfg)[1]
    assert a.to_jsonl() == b.to_jsonl()


def test_polish_is_derivative_free_and_in_budget():
    cfg = OptimizerConfig.box(2, 0.2, n_init=10, n_total=40, n_polish=20, seed=2)
    best, hist = optimize(quad([0.05, 0.05]), cfg)
    assert len(hist) <= 40
    assert np.linalg.norm(best - 0.05) < 0.005
