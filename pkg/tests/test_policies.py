import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import ks_2samp

from prunedql.nn import NumericalError
from prunedql.policies import (PosteriorDiagnostics, WeightPrior, log_softmax, posterior_sample_weight,
                               posterior_sample_weights, sample_weight, soften, softmax_probs, softmax_value)

finite_q = arrays(np.float64, st.integers(2, 8), elements=st.floats(-50, 50))


def test_softmax_closed_form():
    np.testing.assert_allclose(softmax_probs(np.array([1.0, 0.0]), 1.0),
                               [np.e / (np.e + 1), 1 / (np.e + 1)], rtol=1e-12)
    assert softmax_probs(np.array([1.0, 0.0]), 1.0)[0] == pytest.approx(0.7311, abs=1e-4)


def test_softmax_uniform_and_argmax_limit():
    np.testing.assert_allclose(softmax_probs(np.full(5, 3.0), 7.0), np.full(5, 0.2))
    p = softmax_probs(np.array([1.0, 0.0]), 1e3)
    assert abs(p[0] - 1) < 1e-6 and p[1] < 1e-6


def test_softmax_errors():
    with pytest.raises(NumericalError):
        softmax_probs(np.array([np.nan, 1.0]), 1.0)
    with pytest.raises(ValueError):
        softmax_probs(np.array([1.0, 0.0]), 0.0)


def test_softmax_value_examples():
    assert softmax_value(np.full(4, 2.5), 3.0) == pytest.approx(2.5)
    assert softmax_value(np.array([1.0, 0.0]), 1.0) == pytest.approx(np.e / (np.e + 1))


def test_log_softmax_consistent():
    q = np.array([0.3, -1.2, 2.0])
    np.testing.assert_allclose(np.exp(log_softmax(q, 2.0)), softmax_probs(q, 2.0), rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(finite_q, st.floats(0.01, 100))
def test_softmax_normalised_monotone(q, beta):
    p = softmax_probs(q, beta)
    assert abs(p.sum() - 1) < 1e-9 and np.all(p >= 0)
    order = np.argsort(q)
    assert np.all(np.diff(p[order]) >= -1e-15)
    assert softmax_value(q, beta) <= q.max() + 1e-9


@settings(max_examples=60, deadline=None)
@given(finite_q, st.floats(0.01, 10), st.floats(-100, 100))
def test_softmax_additive_invariance(q, beta, c):
    np.testing.assert_allclose(softmax_probs(q + c, beta), softmax_probs(q, beta), atol=1e-9)


def test_softmax_not_scale_invariant():
    q = np.array([1.0, 0.0])
    assert not np.allclose(softmax_probs(q, 1.0), softmax_probs(2 * q, 1.0))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(2, 6), elements=st.floats(-5, 5), unique=True), st.integers(0, 1000))
def test_argmax_consistency_for_large_beta(q, seed):
    top2 = np.sort(q)[-2:]
    if top2[1] - top2[0] < 1e-2:
        return
    assert softmax_probs(q, 1e3).argmax() == q.argmax()


def test_dirichlet_means():
    rng = np.random.default_rng(0)
    w = WeightPrior(np.full(4, 2.0)).sample(rng, 10_000)
    np.testing.assert_allclose(w.mean(axis=0), 0.25, atol=0.02)
    prior = WeightPrior(np.array([1.0, 10, 10, 10, 10]))
    assert prior.mean[0] == pytest.approx(1 / 41)
    w = prior.sample(rng, 20_000)
    assert w[:, 0].mean() == pytest.approx(1 / 41, abs=0.003)
    assert np.all(w >= 0) and np.allclose(w.sum(axis=1), 1, atol=1e-9)


def test_prior_validation_and_single_channel():
    with pytest.raises(ValueError):
        WeightPrior(np.array([1.0, 0.0]))
    w = sample_weight(WeightPrior(np.array([3.0])), np.random.default_rng(0))
    np.testing.assert_array_equal(w, [1.0])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(0.05, 20)), st.integers(0, 2**31))
def test_prior_samples_on_simplex(conc, seed):
    w = WeightPrior(conc).sample(np.random.default_rng(seed), 50)
    assert np.all(w >= 0) and np.allclose(w.sum(axis=-1), 1, atol=1e-9)


def test_posterior_single_channel_is_degenerate():
    q = np.array([[1.0], [2.0]])
    w = posterior_sample_weight(WeightPrior(np.array([1.0])), q, 0, 5.0, 8, np.random.default_rng(0))
    np.testing.assert_array_equal(w, [1.0])


def test_posterior_constant_likelihood_matches_prior():
    # identical action rows -> the likelihood does not depend on w
    rng = np.random.default_rng(1)
    prior = WeightPrior(np.array([1.0, 1.0]))
    q = np.tile(np.array([[0.4, -0.3]]), (3, 1))
    n = 10_000
    post = posterior_sample_weights(prior, np.broadcast_to(q, (n, 3, 2)), np.zeros(n, int), 4.0, 16, rng)
    ref = prior.sample(rng, n)
    assert ks_2samp(post[:, 0], ref[:, 0]).pvalue > 0.01


def test_posterior_shifts_towards_explaining_channel():
    # channel 0 favours action 0, channel 1 disfavours it
    q = np.array([[1.0, -1.0], [0.0, 0.0]])
    prior = WeightPrior(np.array([1.0, 1.0]))
    beta = 3.0
    rng = np.random.default_rng(2)
    # brute-force posterior mean of w_0 by importance weighting 1e5 prior particles
    w = prior.sample(rng, 100_000)
    lik = softmax_probs(w @ q.T, beta)[:, 0]
    oracle = float(np.sum(w[:, 0] * lik) / lik.sum())
    assert oracle > prior.mean[0] + 0.05
    n = 20_000
    post = posterior_sample_weights(prior, np.broadcast_to(q, (n, 2, 2)), np.zeros(n, int), beta, 32, rng)
    assert post[:, 0].mean() > prior.mean[0] + 0.03
    assert post[:, 0].mean() == pytest.approx(oracle, abs=0.03)


def test_posterior_fallback_when_all_weights_vanish():
    # beta * Q overflows for every particle, so no log-likelihood is finite
    q = np.array([[0.0, 0.0], [1e300, 1e300]])
    prior = WeightPrior(np.array([1.0, 1.0]))
    diag = PosteriorDiagnostics()
    w = posterior_sample_weights(prior, q[None], np.array([0]), 1e10, 8, np.random.default_rng(0), diag)
    assert np.isclose(w.sum(), 1.0) and np.all(w >= 0)
    assert diag.draws == 1 and diag.fallbacks == 1


def test_posterior_argument_errors():
    prior = WeightPrior(np.array([1.0, 1.0]))
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        posterior_sample_weights(prior, np.zeros((1, 3, 3)), np.array([0]), 1.0, 4, rng)
    with pytest.raises(ValueError):
        posterior_sample_weights(prior, np.zeros((1, 3, 2)), np.array([3]), 1.0, 4, rng)
    with pytest.raises(ValueError):
        posterior_sample_weights(prior, np.zeros((1, 3, 2)), np.array([0]), 1.0, 0, rng)
    with pytest.raises(NumericalError):
        posterior_sample_weights(prior, np.full((1, 3, 2), np.inf), np.array([0]), 1.0, 4, rng)


def test_soften_examples():
    p = soften(np.array([3]), 0.01, 25)[0]
    assert p[3] == pytest.approx(0.99)
    np.testing.assert_allclose(np.delete(p, 3), 0.01 / 24)
    np.testing.assert_array_equal(soften(np.array([1]), 0.0, 3)[0], [0, 1, 0])
    with pytest.raises(ValueError):
        soften(np.array([0]), 0.1, 1)
    with pytest.raises(ValueError):
        soften(np.array([0]), 1.0, 4)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 30), st.floats(0, 0.999), st.integers(0, 100))
def test_soften_normalised(n_actions, eps, a):
    p = soften(np.array([a % n_actions]), eps, n_actions)
    assert abs(p.sum() - 1) < 1e-9
