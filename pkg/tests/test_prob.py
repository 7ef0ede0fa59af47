import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.integrate import simpson

from vdd.prob import (LOG_2PI, CategoricalParams, GaussianParams, categorical_sample,
                      chol_from_raw, chol_grad_to_raw, gaussian_entropy, gaussian_kl,
                      gaussian_log_pdf, gaussian_score, log_softmax, logsumexp,
                      raw_from_chol, reparameterize, safe_cholesky, softmax)


def random_chol(rng, d, scale=1.0):
    a = rng.standard_normal((d, d))
    return np.linalg.cholesky(scale * (a @ a.T + d * np.eye(d)) / d)


chol_seeds = st.integers(0, 2 ** 32 - 1)


# -- validation ----------------------------------------------------------------

def test_rejects_bad_factors():
    with pytest.raises(ValueError):
        GaussianParams(np.zeros(2), np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(ValueError):
        GaussianParams(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        GaussianParams(np.zeros(3), np.eye(2))
    with pytest.raises(ValueError):
        gaussian_log_pdf(np.zeros(3), GaussianParams(np.zeros(2), np.eye(2)))
    with pytest.raises(ValueError):
        reparameterize(GaussianParams(np.zeros(2), np.eye(2)), np.zeros(3))


def test_categorical_rejects_nonfinite():
    with pytest.raises(ValueError):
        CategoricalParams(np.array([0.0, np.inf]))
    with pytest.raises(ValueError):
        log_softmax(np.array([np.nan, 0.0]))


# -- log density ----------------------------------------------------------------------

def test_log_pdf_standard_normal():
    p = GaussianParams(np.zeros(2), np.eye(2))
    assert np.isclose(gaussian_log_pdf(np.zeros(2), p), -np.log(2 * np.pi), atol=1e-12)
    assert np.isclose(-np.log(2 * np.pi), -1.8378770664, atol=1e-10)


def test_log_pdf_at_mean_diagonal():
    mu = np.array([0.3, -1.2])
    p = GaussianParams(mu, np.diag([0.5, 3.0]))
    assert np.isclose(gaussian_log_pdf(mu, p), -np.log(2 * np.pi) - np.log(1.5), atol=1e-12)


def test_log_pdf_matches_dense_formula():
    rng = np.random.default_rng(0)
    L = random_chol(rng, 3)
    mu = rng.standard_normal(3)
    x = rng.standard_normal((5, 3))
    cov = L @ L.T
    diff = x - mu
    dense = (-0.5 * np.einsum("ni,ij,nj->n", diff, np.linalg.inv(cov), diff)
             - 0.5 * np.log(np.linalg.det(2 * np.pi * cov)))
    np.testing.assert_allclose(gaussian_log_pdf(x, GaussianParams(mu, L)), dense, rtol=1e-12)
    np.testing.assert_allclose(dense, stats.multivariate_normal(mu, cov).logpdf(x), rtol=1e-10)


def test_log_pdf_normalizes_on_grid():
    L = np.array([[0.7, 0.0], [0.4, 0.5]])
    mu = np.array([0.2, -0.1])
    sd = np.sqrt(np.diag(L @ L.T))
    gx = np.linspace(mu[0] - 8 * sd[0], mu[0] + 8 * sd[0], 401)
    gy = np.linspace(mu[1] - 8 * sd[1], mu[1] + 8 * sd[1], 401)
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    dens = np.exp(gaussian_log_pdf(np.stack([X, Y], -1), GaussianParams(mu, L)))
    total = simpson(simpson(dens, x=gy, axis=1), x=gx)
    assert abs(total - 1.0) < 1e-3


def test_log_pdf_batched_factors():
    rng = np.random.default_rng(1)
    Ls = np.stack([random_chol(rng, 2) for _ in range(4)])
    mus = rng.standard_normal((4, 2))
    x = rng.standard_normal((4, 2))
    batch = gaussian_log_pdf(x, GaussianParams(mus, Ls))
    single = [gaussian_log_pdf(x[i], GaussianParams(mus[i], Ls[i])) for i in range(4)]
    np.testing.assert_allclose(batch, single, rtol=1e-12)


# -- reparameterization ----------------------------------------------------------------

def test_reparameterize_trivial():
    p = GaussianParams(np.array([1.0, 2.0]), np.array([[2.0, 0.0], [1.0, 3.0]]))
    np.testing.assert_array_equal(reparameterize(p, np.zeros(2)), p.mean)
    e = np.array([0.3, -0.7])
    np.testing.assert_array_equal(reparameterize(GaussianParams(np.zeros(2), np.eye(2)), e), e)


def test_reparameterize_moments():
    rng = np.random.default_rng(2)
    L = np.array([[1.5, 0.0], [0.6, 0.4]])
    mu = np.array([-1.0, 0.5])
    N = 100_000
    x = reparameterize(GaussianParams(mu, L), rng.standard_normal((N, 2)))
    cov = L @ L.T
    smax = np.sqrt(np.max(np.linalg.eigvalsh(cov)))
    assert np.all(np.abs(x.mean(0) - mu) < 4 * smax / np.sqrt(N))
    assert np.linalg.norm(np.cov(x.T) - cov) / np.linalg.norm(cov) < 0.05


# -- entropy -----------------------------------------------------------------------------

def test_entropy_closed_forms():
    base = gaussian_entropy(GaussianParams(np.zeros(2), np.eye(2)))
    assert np.isclose(base, 1 + np.log(2 * np.pi), atol=1e-12)
    assert np.isclose(base, 2.8378770664, atol=1e-10)
    assert np.isclose(gaussian_entropy(GaussianParams(np.zeros(2), 2 * np.eye(2))), base + np.log(4))


def test_entropy_monte_carlo():
    rng = np.random.default_rng(3)
    p = GaussianParams(np.zeros(2), np.array([[0.8, 0.0], [-0.3, 1.1]]))
    x = reparameterize(p, rng.standard_normal((100_000, 2)))
    lp = gaussian_log_pdf(x, p)
    se = lp.std(ddof=1) / np.sqrt(lp.size)
    assert abs(-lp.mean() - gaussian_entropy(p)) < 3 * se
    assert np.isclose(gaussian_entropy(p), stats.multivariate_normal(p.mean, p.cov).entropy())


@given(chol_seeds)
@settings(max_examples=30, deadline=None)
def test_entropy_depends_on_diagonal_product_only(seed):
    rng = np.random.default_rng(seed)
    L = random_chol(rng, 3)
    diag = np.diag(L)
    k = rng.uniform(0.5, 2.0)
    other = np.diag(diag * np.array([k, 1.0 / k, 1.0]))
    assert np.isclose(gaussian_entropy(GaussianParams(np.zeros(3), L)),
                      gaussian_entropy(GaussianParams(np.zeros(3), other)), rtol=1e-12)


# -- score -----------------------------------------------------------------------------------

def test_score_trivial():
    p = GaussianParams(np.array([1.0, -1.0]), 0.5 * np.eye(2))
    np.testing.assert_allclose(gaussian_score(p.mean, p), 0.0, atol=1e-15)
    x = np.array([2.0, 0.5])
    np.testing.assert_allclose(gaussian_score(x, p), -(x - p.mean) / 0.25, rtol=1e-12)


def test_score_finite_difference():
    rng = np.random.default_rng(4)
    for _ in range(20):
        p = GaussianParams(rng.standard_normal(2), random_chol(rng, 2))
        x = p.mean + rng.standard_normal(2)
        h = 1e-5
        fd = np.array([(gaussian_log_pdf(x + h * e, p) - gaussian_log_pdf(x - h * e, p)) / (2 * h)
                       for e in np.eye(2)])
        g = gaussian_score(x, p)
        assert np.max(np.abs(fd - g)) < 1e-6
        assert np.linalg.norm(fd - g) / np.linalg.norm(g) < 1e-5


# -- categorical -------------------------------------------------------------------------------

def test_log_softmax_uniform_and_stable():
    np.testing.assert_allclose(log_softmax(np.zeros(4)), -np.log(4), atol=1e-15)
    p = softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(p)) and p[0] == 1.0 and p[1] < 1e-300


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_sums_to_one(logits):
    p = CategoricalParams(np.array(logits)).probs
    assert abs(p.sum() - 1.0) < 1e-12


def test_logsumexp_matches_scipy():
    from scipy.special import logsumexp as ref

    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 5, 6)) * 30
    for ax in (0, 1, -1):
        np.testing.assert_allclose(logsumexp(x, axis=ax), ref(x, axis=ax), rtol=1e-13)
    np.testing.assert_allclose(logsumexp(np.full(3, -np.inf)), -np.inf)


def test_categorical_inverse_cdf():
    logits = np.log(np.array([0.2, 0.5, 0.3]))
    assert categorical_sample(logits, np.array(0.0)) == 0
    assert categorical_sample(logits, np.array(0.19999)) == 0
    assert categorical_sample(logits, np.array(0.2000001)) == 1
    assert categorical_sample(logits, np.array(0.99999999)) == 2
    with pytest.raises(ValueError):
        categorical_sample(logits, np.array(1.0))


def test_categorical_frequencies():
    rng = np.random.default_rng(6)
    logits = np.array([0.5, -1.0, 2.0, 0.0])
    p = softmax(logits)
    N = 100_000
    idx = categorical_sample(np.broadcast_to(logits, (N, 4)), rng.random(N))
    freq = np.bincount(idx, minlength=4) / N
    assert np.all(np.abs(freq - p) < 3 * np.sqrt(p * (1 - p) / N))


# -- parameterization --------------------------------------------------------------------------

@given(chol_seeds)
@settings(max_examples=30)
def test_raw_roundtrip(seed):
    rng = np.random.default_rng(seed)
    L = random_chol(rng, 3)
    np.testing.assert_allclose(chol_from_raw(raw_from_chol(L)), L, rtol=1e-12)
    raw = rng.standard_normal((3, 3)) * 3
    out = chol_from_raw(raw)
    assert np.all(np.diag(out) > 0) and np.all(np.triu(out, 1) == 0)


def test_chol_grad_to_raw_finite_difference():
    rng = np.random.default_rng(7)
    raw = np.tril(rng.standard_normal((3, 3)))
    G = rng.standard_normal((3, 3))

    def f(r):  # a scalar function of L
        L = chol_from_raw(r)
        return np.sum(G * L) + 0.5 * np.sum((L @ L.T) ** 2)

    L = chol_from_raw(raw)
    grad_L = G + 2 * (L @ L.T) @ L
    g = chol_grad_to_raw(np.tril(grad_L), L)
    h = 1e-6
    for i in range(3):
        for j in range(i + 1):
            e = np.zeros((3, 3))
            e[i, j] = h
            fd = (f(raw + e) - f(raw - e)) / (2 * h)
            assert abs(fd - g[i, j]) < 1e-6 * max(1.0, abs(fd))


def test_safe_cholesky_floors_eigenvalues():
    cov = np.array([[1.0, 1.0], [1.0, 1.0]])  # rank one
    L = safe_cholesky(cov, floor=1e-8)
    assert np.all(np.diag(L) > 0)
    np.testing.assert_allclose(L @ L.T, cov, atol=1e-7)


def test_gaussian_kl_closed_form():
    rng = np.random.default_rng(8)
    p = GaussianParams(rng.standard_normal(2), random_chol(rng, 2))
    q = GaussianParams(rng.standard_normal(2), random_chol(rng, 2))
    x = reparameterize(p, rng.standard_normal((200_000, 2)))
    diff = gaussian_log_pdf(x, p) - gaussian_log_pdf(x, q)
    assert abs(diff.mean() - gaussian_kl(p, q)) < 4 * diff.std() / np.sqrt(diff.size)
    assert abs(gaussian_kl(p, p)) < 1e-12


def test_log_2pi_constant():
    assert LOG_2PI == np.log(2 * np.pi)
