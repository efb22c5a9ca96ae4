import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sphereboost.errors import ConfigError, ContractError, DomainError
from sphereboost.margin import (LogitBatch, LogitRow, MarginParams,
                                approx_denominator, effective_margin_decomposition,
                                forward_logits, loss_backward, margin_logit,
                                orthogonal_negatives_prob, softmax_prob,
                                softmax_probs, weighted_loss)
from sphereboost.model import unit_rows, unit_rows_backward

from conftest import random_unit_rows


def _params(m_s=1.0, m_a=0.0, m_c=0.0, s=30.0):
    return MarginParams(m_s=m_s, m_a=m_a, m_c=m_c, base_scale=s)


# ---------------------------------------------------------------------------
# margin_logit

def test_margin_logit_zero_angle():
    assert margin_logit(0.0, _params(), 64.0, True) == 64.0


def test_margin_logit_cosface_third_pi():
    got = margin_logit(math.pi / 3, _params(m_c=0.35), 64.0, True)
    assert got == pytest.approx(31.65, abs=1e-9)


def test_margin_logit_arcface_third_pi():
    oracle = 64.0 * math.cos(math.pi / 3 + 0.5)  # ~1.5102
    got = margin_logit(math.pi / 3, _params(m_a=0.5), 64.0, True)
    assert got == pytest.approx(oracle, rel=1e-12)
    assert got == pytest.approx(1.5102, abs=1e-4)


def test_margin_logit_negative_branch_ignores_margins():
    got = margin_logit(1.0, _params(m_s=1.0, m_a=0.4, m_c=0.2), 10.0, False)
    assert got == pytest.approx(10.0 * math.cos(1.0), rel=1e-15)


def test_margin_logit_domain_error():
    with pytest.raises(DomainError):
        margin_logit(-0.1, _params(), 10.0, True)
    with pytest.raises(DomainError):
        margin_logit(math.pi + 0.1, _params(), 10.0, False)


def test_margin_params_validation():
    with pytest.raises(ConfigError):
        MarginParams(m_s=-0.1)
    with pytest.raises(ConfigError):
        MarginParams(base_scale=0.0)
    # multiplicative margin above 1 needs a restricted operating range
    with pytest.raises(ConfigError):
        MarginParams(m_s=2.0)
    MarginParams(m_s=1.35, theta_max=2.0)  # 1.35*2.0 < pi: fine


def test_margin_presets():
    assert MarginParams.preset("cosface").m_c == 0.35
    assert MarginParams.preset("arcface").m_a == 0.5
    with pytest.raises(ConfigError):
        MarginParams.preset("sphereface")


# ---------------------------------------------------------------------------
# forward_logits

def test_forward_logits_feature_equals_center():
    centers = np.eye(4)
    feats = centers[[0, 2]]
    batch = forward_logits(feats, centers, np.array([0, 2]), _params(s=64.0),
                           np.full(2, 64.0))
    assert batch.logits[0, 0] == 64.0
    assert batch.logits[1, 2] == 64.0
    assert batch.logits[0, 1] == 0.0  # orthogonal negative


def test_forward_logits_two_orthogonal_centers():
    centers = np.eye(2)
    batch = forward_logits(centers[[0]], centers, np.array([0]),
                           _params(m_c=0.35, s=30.0), np.array([30.0]))
    assert batch.logits[0, 0] == pytest.approx(29.65, abs=1e-12)
    assert batch.logits[0, 1] == 0.0


def test_forward_logits_matches_scalar_loop_oracle():
    rng = np.random.default_rng(11)
    feats = random_unit_rows(rng, 7, 10)
    centers = random_unit_rows(rng, 5, 10)
    labels = rng.integers(0, 5, 7)
    scales = rng.uniform(10.0, 40.0, 7)
    params = _params(m_s=1.0, m_a=0.3, m_c=0.1)
    batch = forward_logits(feats, centers, labels, params, scales)
    for i in range(7):
        for j in range(5):
            theta = math.acos(min(1.0, max(-1.0, float(feats[i] @ centers[j]))))
            want = margin_logit(theta, params, float(scales[i]), j == labels[i])
            assert batch.logits[i, j] == pytest.approx(want, rel=1e-13, abs=1e-12)


def test_forward_logits_rejects_non_unit():
    centers = np.eye(3)
    with pytest.raises(ContractError):
        forward_logits(np.array([[2.0, 0.0, 0.0]]), centers, np.array([0]),
                       _params(), np.array([30.0]))
    with pytest.raises(ContractError):
        forward_logits(centers[[0]], 1.5 * centers, np.array([0]),
                       _params(), np.array([30.0]))


def test_forward_logits_rejects_bad_scale_and_labels():
    centers = np.eye(3)
    with pytest.raises(ContractError):
        forward_logits(centers[[0]], centers, np.array([0]), _params(),
                       np.array([0.0]))
    with pytest.raises(ContractError):
        forward_logits(centers[[0]], centers, np.array([5]), _params(),
                       np.array([30.0]))


# ---------------------------------------------------------------------------
# softmax_prob

def test_softmax_two_equal_logits():
    row = LogitRow(np.array([3.0, 3.0]), 0, 30.0)
    assert softmax_prob(row) == 0.5


def test_softmax_direct_summation_oracle():
    row = LogitRow(np.array([10.0, 0.0, 0.0]), 0, 30.0)
    oracle = math.exp(10) / (math.exp(10) + 2.0)
    assert softmax_prob(row) == pytest.approx(oracle, rel=1e-14)
    assert softmax_prob(row) == pytest.approx(0.9999092, abs=1e-7)


def test_softmax_saturation_regime_many_negatives():
    # 10000 orthogonal negatives cap the achievable confidence at small scale
    p = orthogonal_negatives_prob(0.0, 10.0, 10001)
    oracle = math.exp(10) / (math.exp(10) + 10000.0)
    assert p == pytest.approx(oracle, rel=1e-12)
    assert p == pytest.approx(0.6877, abs=1e-4)


def test_softmax_floor_clamp():
    row = LogitRow(np.array([-200.0, 0.0]), 0, 30.0)
    assert softmax_prob(row) == 1e-12


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    feats = random_unit_rows(rng, 6, 8)
    centers = random_unit_rows(rng, 9, 8)
    batch = forward_logits(feats, centers, rng.integers(0, 9, 6), _params(),
                           np.full(6, 30.0))
    sums = batch.probs.sum(axis=1)
    assert np.all(np.abs(sums - 1.0) <= 1e-12)
    probs = softmax_probs(batch)
    assert np.all((probs >= 1e-12) & (probs <= 1.0))


def test_prob_strictly_increasing_in_positive_logit():
    base = np.array([2.0, 1.0, -1.0])
    last = 0.0
    for bump in np.linspace(0.0, 3.0, 7):
        logits = base.copy()
        logits[0] += bump
        p = softmax_prob(LogitRow(logits, 0, 30.0))
        assert p > last
        last = p


@given(st.floats(0.0, math.pi - 0.5), st.floats(0.0, 0.4), st.floats(0.0, 0.4))
@settings(max_examples=60, deadline=None)
def test_positive_logit_non_increasing_in_margins(theta, m_a, m_c):
    s = 30.0
    base = margin_logit(theta, _params(m_a=m_a, m_c=m_c), s, True)
    more_a = margin_logit(theta, _params(m_a=m_a + 0.05, m_c=m_c), s, True)
    more_c = margin_logit(theta, _params(m_a=m_a, m_c=m_c + 0.05), s, True)
    assert more_a <= base + 1e-12
    assert more_c < base


# ---------------------------------------------------------------------------
# weighted_loss

def _batch_from_logp(logp):
    n = len(logp)
    return LogitBatch(logits=np.zeros((n, 2)), labels=np.zeros(n, dtype=np.int64),
                      scales=np.full(n, 30.0), cos=np.zeros((n, 2)),
                      probs=np.zeros((n, 2)), logp_pos=np.asarray(logp, dtype=np.float64))


def test_weighted_loss_perfect_confidence_is_zero():
    centers = np.eye(2)
    batch = forward_logits(centers[[0]], centers, np.array([0]),
                           _params(s=800.0), np.array([800.0]))
    assert batch.logp_pos[0] == 0.0
    assert weighted_loss(batch, np.ones(1)) == 0.0


def test_weighted_loss_uniform_weights_is_mean_cross_entropy():
    # scale kept moderate so no row trips the 1e-12 probability floor
    rng = np.random.default_rng(4)
    feats = random_unit_rows(rng, 10, 6)
    centers = random_unit_rows(rng, 7, 6)
    labels = rng.integers(0, 7, 10)
    batch = forward_logits(feats, centers, labels, _params(s=8.0), np.full(10, 8.0))
    # independent plain cross-entropy on the same logits
    z = batch.logits
    lse = np.log(np.sum(np.exp(z - z.max(axis=1, keepdims=True)), axis=1)) \
        + z.max(axis=1)
    ce = float(np.mean(lse - z[np.arange(10), labels]))
    assert weighted_loss(batch, np.ones(10)) == pytest.approx(ce, rel=1e-12)


def test_weighted_loss_arithmetic_oracle():
    batch = _batch_from_logp(np.log([0.5, 0.25]))
    oracle = -(math.log(0.5) + 2.0 * math.log(0.25)) / 2.0  # ~1.73287
    got = weighted_loss(batch, np.array([1.0, 2.0]))
    assert got == pytest.approx(oracle, rel=1e-12)
    assert got == pytest.approx(1.73287, abs=1e-5)


# ---------------------------------------------------------------------------
# loss_backward

def test_loss_backward_zero_weights_zero_grads():
    rng = np.random.default_rng(5)
    feats = random_unit_rows(rng, 5, 6)
    centers = random_unit_rows(rng, 4, 6)
    batch = forward_logits(feats, centers, rng.integers(0, 4, 5), _params(m_c=0.35),
                           np.full(5, 30.0))
    gf, gc = loss_backward(batch, np.zeros(5), feats, centers, _params(m_c=0.35))
    assert not gf.any() and not gc.any()


def test_loss_backward_linear_in_weights():
    rng = np.random.default_rng(6)
    feats = random_unit_rows(rng, 5, 6)
    centers = random_unit_rows(rng, 4, 6)
    params = _params(m_a=0.3)
    w = rng.uniform(0.5, 2.0, 5)
    batch = forward_logits(feats, centers, rng.integers(0, 4, 5), params, np.full(5, 30.0))
    gf1, gc1 = loss_backward(batch, w, feats, centers, params)
    gf2, gc2 = loss_backward(batch, 2.0 * w, feats, centers, params)
    assert gf2.tobytes() == (2.0 * gf1).tobytes()
    assert gc2.tobytes() == (2.0 * gc1).tobytes()


@pytest.mark.parametrize("seed", range(4))
def test_loss_backward_matches_finite_differences(seed):
    # differentiate through the row normalization into the margin loss,
    # for raw (unnormalized) features and centers
    rng = np.random.default_rng(100 + seed)
    raw_feats = rng.standard_normal((4, 6))
    raw_centers = rng.standard_normal((5, 6))
    labels = rng.integers(0, 5, 4)
    weights = rng.uniform(0.5, 2.0, 4)
    scales = rng.uniform(15.0, 45.0, 4)
    params = _params(m_s=1.0, m_a=0.25, m_c=0.15)

    def compute_loss():
        f, _ = unit_rows(raw_feats)
        c, _ = unit_rows(raw_centers)
        batch = forward_logits(f, c, labels, params, scales)
        return weighted_loss(batch, weights)

    feats, f_norms = unit_rows(raw_feats)
    centers, c_norms = unit_rows(raw_centers)
    batch = forward_logits(feats, centers, labels, params, scales)
    gf_unit, gc_unit = loss_backward(batch, weights, feats, centers, params)
    gf = unit_rows_backward(gf_unit, feats, f_norms)
    gc = unit_rows_backward(gc_unit, centers, c_norms)

    h = 1e-6
    for raw, analytic in ((raw_feats, gf), (raw_centers, gc)):
        flat = raw.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = compute_loss()
            flat[i] = orig - h
            down = compute_loss()
            flat[i] = orig
            num[i] = (up - down) / (2 * h)
        scale = max(np.abs(analytic).max(), np.abs(num).max())
        assert np.abs(analytic.reshape(-1) - num).max() / scale < 1e-5


# ---------------------------------------------------------------------------
# approx_denominator / decomposition

def test_approx_denominator_exact_when_negatives_orthogonal():
    pos = 12.5
    c = 40
    true_denominator = math.exp(pos) + float(np.sum(np.exp(np.zeros(c - 1))))
    assert approx_denominator(pos, c) == true_denominator


def test_approx_denominator_single_class():
    assert approx_denominator(3.0, 1) == math.exp(3.0)


def test_decomposition_identity_weight():
    params = _params(m_c=0.35, s=64.0)
    assert effective_margin_decomposition(1.0, params) == (64.0, 0.35)


def test_decomposition_doubling():
    params = _params(m_c=0.35, s=64.0)
    assert effective_margin_decomposition(2.0, params) == (128.0, 0.70)


def test_decomposition_identity_at_third_pi():
    params = _params(m_c=0.35, s=30.0)
    d, theta = 1.5, math.pi / 3
    f = 30.0 * math.cos(theta) - 0.35
    lhs = math.exp(f) ** d
    eff_scale, eff_margin = effective_margin_decomposition(d, params)
    rhs = math.exp(eff_scale * math.cos(theta) - eff_margin)
    assert abs(lhs - rhs) / rhs < 1e-12


@given(st.floats(0.0, math.pi), st.floats(0.1, 3.0),
       st.floats(0.0, 0.5), st.floats(0.0, 0.5), st.floats(1.0, 40.0))
@settings(max_examples=200, deadline=None)
def test_decomposition_identity_random(theta, d, m_a, m_c, s):
    params = _params(m_s=1.0, m_a=m_a, m_c=m_c, s=s)
    f = margin_logit(theta, params, s, True)
    lhs = math.exp(f) ** d
    eff_scale, eff_margin = effective_margin_decomposition(d, params)
    rhs = math.exp(eff_scale * math.cos(1.0 * theta + m_a) - eff_margin)
    assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), abs(rhs))


# ---------------------------------------------------------------------------
# saturation-curve shape

def test_scale_curve_shape_properties():
    c = 10001
    assert orthogonal_negatives_prob(0.0, 10.0, c) < 0.7
    assert orthogonal_negatives_prob(0.0, 64.0, c) > 1.0 - 1e-6
    assert orthogonal_negatives_prob(math.radians(80.0), 64.0, c) > 0.85
