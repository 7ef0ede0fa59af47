import json

import numpy as np
import pytest
from conftest import make_moe
from scipy.integrate import simpson

from vdd.errors import CheckpointVersionError
from vdd.moe import (FeatureMap, MoEParams, expert_forward, gating_log_probs, init_moe,
                     make_feature_map, median_bandwidth, moe_from_dict, moe_from_gmm_target,
                     moe_log_pdf, moe_mode_action, moe_sample, moe_to_dict)
from vdd.prob import gaussian_log_pdf, raw_from_chol, reparameterize, softmax
from vdd.sde import circle_gmm


def fixed(W, b, chols, V=None, c=None, feats=None):
    W = np.asarray(W, dtype=np.float64)
    Z, d, f = W.shape
    feats = feats or FeatureMap("identity", f)
    return MoEParams(W, np.asarray(b, dtype=np.float64), raw_from_chol(np.asarray(chols)),
                     np.zeros((Z, f)) if V is None else np.asarray(V, dtype=np.float64),
                     np.zeros(Z) if c is None else np.asarray(c, dtype=np.float64), feats)


# -- features and experts ------------------------------------------------------

def test_identity_expert_mean_is_state():
    m = fixed([np.eye(2)], [[0.0, 0.0]], [np.eye(2)])
    s = np.array([0.4, -1.3])
    np.testing.assert_array_equal(expert_forward(m, s, 0).mean, s)


def test_zero_weights_mean_is_bias():
    m = fixed(np.zeros((2, 2, 2)), [[1.0, 2.0], [3.0, 4.0]], np.array([np.eye(2)] * 2))
    for s in np.random.default_rng(0).standard_normal((5, 2)):
        np.testing.assert_array_equal(expert_forward(m, s, 1).mean, [3.0, 4.0])
    with pytest.raises(IndexError):
        expert_forward(m, np.zeros(2), 2)


def test_polynomial_expansion_scalar_state():
    feats = FeatureMap("polynomial", 1, degree=2)
    assert feats.dim == 2
    W = np.array([[[1.5, -0.5], [0.25, 2.0]]])
    m = fixed(W, [[0.1, 0.2]], [np.eye(2)], feats=feats)
    for s in (-1.2, 0.0, 0.7, 3.0):
        expect = [0.1 + 1.5 * s - 0.5 * s ** 2, 0.2 + 0.25 * s + 2.0 * s ** 2]
        np.testing.assert_allclose(expert_forward(m, np.array([s]), 0).mean, expect, rtol=1e-14)


def test_polynomial_monomials_two_dims():
    s = np.array([[2.0, 3.0]])
    np.testing.assert_allclose(FeatureMap("polynomial", 2, degree=2)(s), [[2, 3, 4, 6, 9]])


def test_fourier_features_frozen():
    a = FeatureMap("fourier", 2, n_freq=16, bandwidth=0.7, seed=3)
    b = FeatureMap("fourier", 2, n_freq=16, bandwidth=0.7, seed=3)
    s = np.random.default_rng(1).standard_normal((10, 2))
    np.testing.assert_array_equal(a(s), b(s))
    c = FeatureMap.from_dict(json.loads(json.dumps(a.to_dict())))
    np.testing.assert_array_equal(a(s), c(s))
    # the kernel approximation: phi(x).phi(y) ~ exp(-|x-y|^2 / (2 bw^2))
    big = FeatureMap("fourier", 2, n_freq=20_000, bandwidth=0.7, seed=0)
    x, y = np.array([[0.0, 0.0]]), np.array([[0.5, -0.2]])
    k = float((big(x) @ big(y).T)[0, 0])
    assert abs(k - np.exp(-0.29 / (2 * 0.49))) < 0.03


def test_median_bandwidth():
    s = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    # pairwise distances are 1, 2 and sqrt(5)
    assert median_bandwidth(s) == 2.0
    fm = make_feature_map("fourier", s, n_freq=8, bandwidth_scale=0.5)
    assert fm.bandwidth == 1.0


# -- gating and density -----------------------------------------------------------

def test_gating_uniform_and_single():
    m = fixed(np.zeros((4, 2, 2)), np.zeros((4, 2)), np.array([np.eye(2)] * 4))
    np.testing.assert_allclose(gating_log_probs(m, np.ones(2)), -np.log(4), atol=1e-15)
    m1 = fixed(np.zeros((1, 2, 2)), np.zeros((1, 2)), np.array([np.eye(2)]), V=[[5.0, -3.0]], c=[2.0])
    assert gating_log_probs(m1, np.ones(2))[0] == 0.0


def test_gating_dense_softmax(rng):
    m = make_moe(rng, Z=5, kind="fourier")
    s = rng.standard_normal(2)
    logits = m.V @ m.features(s)[0] + m.c
    p = np.exp(logits) / np.sum(np.exp(logits))
    np.testing.assert_allclose(np.exp(gating_log_probs(m, s)), p, rtol=1e-12)


def test_log_pdf_single_expert(rng):
    m = make_moe(rng, Z=1)
    a, s = rng.standard_normal(2), rng.standard_normal(2)
    assert np.isclose(moe_log_pdf(m, a, s), gaussian_log_pdf(a, expert_forward(m, s, 0)), rtol=1e-13)


def test_log_pdf_identical_experts_collapse(rng):
    m1 = make_moe(rng, Z=1, gating=False)
    m2 = MoEParams(np.repeat(m1.W, 2, 0), np.repeat(m1.b, 2, 0), np.repeat(m1.chol_raw, 2, 0),
                   np.zeros((2, 2)), np.zeros(2), m1.features)
    a, s = rng.standard_normal((7, 2)), rng.standard_normal((7, 2))
    np.testing.assert_allclose(moe_log_pdf(m2, a, s), moe_log_pdf(m1, a, s), rtol=1e-13)


def test_log_pdf_naive_sum(rng):
    m = make_moe(rng, Z=4)
    for _ in range(10):
        a, s = rng.standard_normal(2), rng.standard_normal(2)
        w = np.exp(gating_log_probs(m, s))
        dens = sum(w[z] * np.exp(gaussian_log_pdf(a, expert_forward(m, s, z))) for z in range(4))
        assert np.isclose(moe_log_pdf(m, a, s), np.log(dens), rtol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_log_pdf_normalizes(seed):
    m = make_moe(np.random.default_rng(seed), Z=3)
    s = np.zeros(2)
    means = np.stack([expert_forward(m, s, z).mean for z in range(3)])
    sd = np.sqrt(np.max([np.diag(expert_forward(m, s, z).cov) for z in range(3)], axis=0))
    gx = np.linspace(means[:, 0].min() - 8 * sd[0], means[:, 0].max() + 8 * sd[0], 501)
    gy = np.linspace(means[:, 1].min() - 8 * sd[1], means[:, 1].max() + 8 * sd[1], 501)
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    dens = np.exp(moe_log_pdf(m, np.stack([X.ravel(), Y.ravel()], 1), s)).reshape(X.shape)
    assert abs(simpson(simpson(dens, x=gy, axis=1), x=gx) - 1.0) < 1e-3


# -- sampling --------------------------------------------------------------------------

def test_sample_deterministic(rng):
    m = make_moe(rng, Z=3)
    s = rng.standard_normal((20, 2))
    z1, a1 = moe_sample(m, s, np.random.default_rng(5))
    z2, a2 = moe_sample(m, s, np.random.default_rng(5))
    np.testing.assert_array_equal(z1, z2)
    np.testing.assert_array_equal(a1, a2)


def test_sample_single_expert_uses_reparameterization(rng):
    m = make_moe(rng, Z=1)
    s = rng.standard_normal(2)
    _, a = moe_sample(m, s, np.random.default_rng(9))
    g = np.random.default_rng(9)
    g.random(1)  # the component draw
    eps = g.standard_normal(2)
    np.testing.assert_allclose(a, reparameterize(expert_forward(m, s, 0), eps), rtol=1e-14)


def test_sample_component_frequencies(rng):
    m = make_moe(rng, Z=4)
    s = rng.standard_normal(2)
    N = 100_000
    z, _ = moe_sample(m, np.repeat(s[None], N, 0), np.random.default_rng(0))
    p = np.exp(gating_log_probs(m, s))
    freq = np.bincount(z, minlength=4) / N
    assert np.all(np.abs(freq - p) < 3 * np.sqrt(p * (1 - p) / N))


def test_samples_prefer_mixture_to_any_expert():
    m = fixed(np.zeros((2, 2, 2)), [[-3.0, 0.0], [3.0, 0.0]], np.array([0.3 * np.eye(2)] * 2))
    s = np.zeros((5000, 2))
    _, a = moe_sample(m, s, np.random.default_rng(1))
    mix = moe_log_pdf(m, a, s).mean()
    for z in range(2):
        assert mix > np.mean(gaussian_log_pdf(a, expert_forward(m, np.zeros(2), z)))


# -- mode actions ------------------------------------------------------------------------

def test_mode_action_rules():
    m1 = fixed([np.eye(2)], [[0.5, 0.5]], [np.eye(2)])
    s = np.array([1.0, -1.0])
    z, a = moe_mode_action(m1, s, "sample-then-mean", np.random.default_rng(0))
    assert z == 0 and np.allclose(a, s + 0.5)
    m3 = fixed(np.zeros((3, 2, 2)), np.eye(3, 2), np.array([np.eye(2)] * 3), c=[2.0, 1.0, 1.0])
    assert moe_mode_action(m3, s, "argmax-then-mean")[0] == 0
    m2 = fixed(np.zeros((2, 2, 2)), np.eye(2), np.array([np.eye(2)] * 2), c=[1.0, 1.0])
    assert moe_mode_action(m2, s, "argmax-then-mean")[0] == 0
    with pytest.raises(ValueError):
        moe_mode_action(m2, s, "sample-then-mean")


# -- construction and serialization ---------------------------------------------------

def test_init_follows_data(rng):
    states = rng.standard_normal((50, 2))
    actions = rng.standard_normal((50, 2)) * 2.0
    m = init_moe(6, states, actions, FeatureMap("identity", 2), rng, cov_scale=0.25)
    assert np.all(m.W == 0) and np.all(m.V == 0) and np.all(m.c == 0)
    scale = np.mean(actions.std(0))
    np.testing.assert_allclose(m.chols[0], 0.5 * scale * np.eye(2))
    with pytest.raises(ValueError):
        init_moe(0, states, actions, FeatureMap("identity", 2), rng)


def test_wrap_gmm_target_is_exact():
    tgt = circle_gmm(8, 1.0, 0.1)
    m = moe_from_gmm_target(tgt)
    rng = np.random.default_rng(2)
    a, s = rng.standard_normal((40, 2)), rng.standard_normal((40, 2))
    np.testing.assert_allclose(moe_log_pdf(m, a, s), tgt.log_pdf(a, s), rtol=1e-12)


@pytest.mark.parametrize("kind", ["identity", "polynomial", "fourier"])
def test_checkpoint_roundtrip_bit_exact(rng, kind):
    m = make_moe(rng, Z=3, kind=kind)
    back = moe_from_dict(json.loads(json.dumps(moe_to_dict(m))))
    a, s = rng.standard_normal((100, 2)), rng.standard_normal((100, 2))
    np.testing.assert_array_equal(moe_log_pdf(m, a, s), moe_log_pdf(back, a, s))
    np.testing.assert_array_equal(moe_sample(m, s, np.random.default_rng(0))[1],
                                  moe_sample(back, s, np.random.default_rng(0))[1])
    d = moe_to_dict(m)
    d["version"] = 7
    with pytest.raises(CheckpointVersionError, match="7"):
        moe_from_dict(d)


def test_shape_validation(rng):
    m = make_moe(rng, Z=2)
    with pytest.raises(ValueError):
        MoEParams(m.W, m.b[:1], m.chol_raw, m.V, m.c, m.features)
    with pytest.raises(ValueError):
        MoEParams(m.W[:0], m.b[:0], m.chol_raw[:0], m.V[:0], m.c[:0], m.features)


def test_softmax_consistency(rng):
    m = make_moe(rng, Z=3)
    s = rng.standard_normal((4, 2))
    np.testing.assert_allclose(np.exp(gating_log_probs(m, s)), softmax(m.gating_logits(s)))
