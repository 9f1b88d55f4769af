import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedssl.nn import flatten, forward, init_params
from fedssl.pseudolabel import (
    DISCARD,
    BatchDecisions,
    LogitPair,
    Metric,
    Mode,
    Source,
    SslConfig,
    confidence,
    confidence_neg_entropy,
    confidence_variance,
    decide,
    decide_batch,
    lambda_weight,
    pseudo_label,
    select_logit,
    semi_supervised_batch_loss,
    sharpen,
)


def prob_batch(n_min=1, n_max=8, classes=(2, 6)):
    return st.tuples(st.integers(n_min, n_max), st.integers(*classes)).flatmap(
        lambda s: arrays(np.float64, s, elements=st.floats(0.0, 1.0))
    ).map(lambda a: (a + 1e-3) / (a + 1e-3).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------- confidence

def test_variance_examples():
    assert confidence_variance(np.full(4, 0.25)) == 0.0
    assert confidence_variance(np.array([1.0, 0.0])) == pytest.approx(0.25, abs=1e-15)
    assert confidence_variance(np.array([0.7, 0.2, 0.1])) == pytest.approx(0.068889, abs=1e-6)


def test_neg_entropy_examples():
    assert confidence_neg_entropy(np.full(5, 0.2)) == pytest.approx(0.0, abs=1e-15)
    assert confidence_neg_entropy(np.array([0, 0, 1.0, 0])) == pytest.approx(math.log(4), abs=1e-15)
    assert confidence_neg_entropy(np.array([0.5, 0.5, 0.0])) == pytest.approx(0.405465, abs=1e-6)


@given(prob_batch())
def test_confidences_nonnegative(p):
    for m in Metric:
        assert np.all(confidence(p, m) >= 0)


# ---------------------------------------------------------------- selection

def _pair(gc, lc):
    return LogitPair(np.array([0.6, 0.4]), np.array([0.3, 0.7]), gc, lc)


def test_selection_examples():
    assert select_logit(_pair(0.3, 0.1))[2] is Source.GLOBAL
    assert select_logit(_pair(0.2, 0.2))[2] is Source.GLOBAL
    assert select_logit(_pair(0.9, 0.1), Mode.LOCAL_ONLY)[2] is Source.LOCAL
    assert select_logit(_pair(0.1, 0.9), Mode.GLOBAL_ONLY)[2] is Source.GLOBAL
    s, sm, src = select_logit(_pair(0.1, 0.3))
    assert src is Source.LOCAL
    np.testing.assert_array_equal(s, [0.3, 0.7])
    np.testing.assert_array_equal(sm, [0.6, 0.4])


@given(st.floats(0, 1), st.floats(0, 1))
def test_selection_invariant_under_monotone_map(a, b):
    f = lambda v: math.exp(3 * v) + 7  # noqa: E731
    assert select_logit(_pair(a, b))[2] is select_logit(_pair(f(a), f(b)))[2]


def test_threshold_examples():
    s = np.array([0.7, 0.2, 0.1])
    assert pseudo_label(s, 0.5) == 0
    assert pseudo_label(s, 0.9) == DISCARD
    assert pseudo_label(s, 0.7) == DISCARD  # strict
    assert pseudo_label(np.array([1.0, 0.0]), 1.0) == DISCARD


def test_lambda_examples():
    assert lambda_weight(0.04, 0.04, 0.7) == 0.7
    assert lambda_weight(0.04, 0.0, 1.0) == 0.0
    assert lambda_weight(0.04, 0.01, 1.0) == pytest.approx(0.25, abs=1e-15)
    assert lambda_weight(0.0, 0.0, 1.0) == 0.0


def test_decide_kl_activation():
    cfg = SslConfig(beta=0.5)
    agree = decide(LogitPair.from_probs([0.8, 0.2], [0.6, 0.4]), cfg)
    assert agree.label == 0 and agree.kl_active and agree.selected is Source.GLOBAL
    assert agree.lam == pytest.approx(confidence_variance(np.array([0.6, 0.4])) / confidence_variance(np.array([0.8, 0.2])))
    disagree = decide(LogitPair.from_probs([0.9, 0.1], [0.4, 0.6]), cfg)
    assert disagree.label == 0 and not disagree.kl_active and disagree.lam == 0.0
    fail = decide(LogitPair.from_probs([0.55, 0.45], [0.52, 0.48]), SslConfig(beta=0.6))
    assert fail.label == DISCARD and not fail.kl_active


@settings(max_examples=60)
@given(prob_batch(), st.floats(0, 1), st.floats(0, 3), st.sampled_from(list(Metric)), st.sampled_from(list(Mode)))
def test_batch_matches_scalar_and_lambda_bounded(p, beta, lam0, metric, mode):
    q = np.roll(p, 1, axis=1)
    cfg = SslConfig(beta, lam0, metric, mode)
    batch = decide_batch(p, q, cfg)
    assert np.all(batch.lam <= lam0 + 1e-15)
    assert np.all(batch.lam >= 0)
    for i in range(p.shape[0]):
        one = decide(LogitPair.from_probs(p[i], q[i], metric), cfg)
        assert one.label == batch.labels[i]
        assert one.kl_active == batch.kl_active[i]
        assert one.lam == pytest.approx(batch.lam[i], abs=1e-15)
        assert (one.selected is Source.LOCAL) == batch.selected_local[i]


def test_identical_models_reduce_to_single_model_decision():
    p = np.array([[0.7, 0.2, 0.1], [0.4, 0.35, 0.25], [0.1, 0.1, 0.8]])
    d = decide_batch(p, p.copy(), SslConfig(beta=0.5, lambda0=0.8))
    assert not d.selected_local.any()
    np.testing.assert_array_equal(d.labels, [0, DISCARD, 2])
    np.testing.assert_array_equal(d.lam, [0.8, 0.0, 0.8])


def test_config_validation():
    with pytest.raises(ValueError):
        SslConfig(beta=1.5)
    with pytest.raises(ValueError):
        SslConfig(lambda0=-1)


# ---------------------------------------------------------------- loss

def _decisions(labels, s_minus, lam, active):
    n = len(labels)
    return BatchDecisions(np.zeros(n, bool), np.asarray(s_minus, float), np.asarray(labels), np.asarray(active),
                          np.asarray(lam, float), np.zeros(n), np.zeros(n))


def test_all_discarded_gives_zero():
    w = init_params([3, 4, 2], np.random.default_rng(0))
    d = _decisions([DISCARD, DISCARD], [[0.5, 0.5]] * 2, [0, 0], [False, False])
    loss, grad, n = semi_supervised_batch_loss(w, np.ones((2, 3)), d)
    assert (loss, n) == (0.0, 0) and not grad.any()


def test_single_sample_at_minimum_has_zero_loss():
    w = flatten([(np.eye(3) * 80.0, np.zeros(3))])
    x = np.array([[0.0, 1.0, 0.0]])
    target = forward(w, x)
    d = _decisions([1], target, [1.0], [True])
    loss, _, n = semi_supervised_batch_loss(w, x, d)
    assert n == 1 and loss == pytest.approx(0.0, abs=1e-12)


def test_lambda0_zero_is_pure_ce():
    rng = np.random.default_rng(1)
    w = init_params([4, 5, 3], rng)
    x = rng.normal(size=(6, 4))
    gp, lp = forward(w, x), forward(init_params([4, 5, 3], rng), x)
    d = decide_batch(gp, lp, SslConfig(beta=0.0, lambda0=0.0))
    _, g0, _ = semi_supervised_batch_loss(w, x, d)
    d_ce = _decisions(d.labels, d.s_minus_star, np.zeros(6), np.zeros(6, bool))
    _, g1, _ = semi_supervised_batch_loss(w, x, d_ce)
    np.testing.assert_array_equal(g0, g1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_scrambling_inactive_targets_leaves_gradient_unchanged(seed):
    rng = np.random.default_rng(seed)
    w = init_params([4, 6, 3], rng)
    x = rng.normal(size=(8, 4))
    d = decide_batch(rng.dirichlet(np.ones(3), 8), rng.dirichlet(np.ones(3), 8), SslConfig(beta=0.2, lambda0=1.0))
    scrambled = d.s_minus_star.copy()
    off = ~d.kl_active
    scrambled[off] = rng.dirichlet(np.ones(3), int(off.sum()))
    d2 = _decisions(d.labels, scrambled, d.lam, d.kl_active)
    _, g1, _ = semi_supervised_batch_loss(w, x, d)
    _, g2, _ = semi_supervised_batch_loss(w, x, d2)
    np.testing.assert_array_equal(g1, g2)


def test_sharpen():
    p = np.array([0.6, 0.3, 0.1])
    np.testing.assert_allclose(sharpen(p, 1.0), p)
    s = sharpen(p, 0.5)
    np.testing.assert_allclose(s, p**2 / (p**2).sum())
