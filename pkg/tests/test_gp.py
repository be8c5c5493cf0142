import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spngp.gp import (
    LOG_2PI, GpLeaf, NumericalError, StateError, cholesky_with_jitter, evidence_and_grad,
)
from spngp.kernels import LINEAR, MATERN, PERIODIC, SE_ARD, KernelSpec, kernel_matrix


def dense_oracle(kernel, noise, X, y, Xs):
    """Explicit-inverse GP formulas."""
    C = kernel_matrix(kernel, X) + noise**2 * np.eye(len(y))
    Ci = np.linalg.inv(C)
    Ks = kernel_matrix(kernel, Xs, X)
    mean = Ks @ Ci @ y
    var = np.diag(kernel_matrix(kernel, Xs)) - np.einsum("ij,jk,ik->i", Ks, Ci, Ks)
    _, logdet = np.linalg.slogdet(C)
    ev = -0.5 * y @ Ci @ y - 0.5 * logdet - 0.5 * len(y) * LOG_2PI
    return mean, var, ev


def make_leaf(n=20, D=2, family=SE_ARD, noise=0.3, seed=0, overlap=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, (n, D))
    y = np.sin(X.sum(axis=1)) + 0.3 * rng.standard_normal(n)
    ls = rng.uniform(0.5, 1.5, D)
    spec = KernelSpec.create(family, D, sigma_f=1.2, lengthscale=ls if family != PERIODIC else 0.9,
                             period=2.5)
    return GpLeaf(spec, math.log(noise), X, y, overlap_count=overlap)


def test_empty_leaf_evidence_zero_and_prior():
    spec = KernelSpec.create(SE_ARD, 1, sigma_f=1.0, lengthscale=1.0)
    leaf = GpLeaf(spec, 0.0, np.zeros((0, 1)), np.zeros(0)).fit()
    assert leaf.log_evidence == 0.0
    pm = leaf.predict(np.array([[0.3], [5.0]]))
    np.testing.assert_array_equal(pm.mean, 0.0)
    np.testing.assert_array_equal(pm.var_f, 1.0)
    np.testing.assert_array_equal(pm.var_y, 2.0)


def test_single_point_evidence():
    spec = KernelSpec.create(SE_ARD, 1, sigma_f=1.0, lengthscale=1.0)
    leaf = GpLeaf(spec, 0.0, np.zeros((1, 1)), np.zeros(1)).fit()
    assert leaf.log_evidence == pytest.approx(-0.5 * math.log(2) - 0.5 * math.log(2 * math.pi), rel=1e-15)


@pytest.mark.parametrize("family", [SE_ARD, LINEAR, MATERN])
def test_two_point_evidence_explicit_2x2(family):
    leaf = make_leaf(2, 1, family, seed=3).fit()
    C = kernel_matrix(leaf.kernel, leaf.X) + leaf.noise_var * np.eye(2)
    a, b, d = C[0, 0], C[0, 1], C[1, 1]
    det = a * d - b * b
    inv = np.array([[d, -b], [-b, a]]) / det
    y = leaf.y
    want = -0.5 * y @ inv @ y - 0.5 * math.log(det) - LOG_2PI
    assert leaf.log_evidence == pytest.approx(want, abs=1e-12)


def test_noiseless_interpolation():
    spec = KernelSpec.create(SE_ARD, 1, sigma_f=1.0, lengthscale=0.5)
    X = np.array([[-2.0], [-0.5], [0.7], [2.0]])
    leaf = GpLeaf(spec, math.log(1e-4), X, np.array([0.3, -1.0, 0.8, 0.1])).fit()
    pm = leaf.predict(leaf.X)
    np.testing.assert_allclose(pm.mean, leaf.y, atol=1e-6)
    assert np.all(np.abs(pm.var_f) < 1e-6)


@pytest.mark.parametrize("family", [SE_ARD, LINEAR, MATERN, PERIODIC])
def test_predict_matches_explicit_inverse(family):
    D = 1
    leaf = make_leaf(3, D, family, seed=5).fit()
    Xs = np.random.default_rng(6).uniform(-3, 3, (5, D))
    mean, var, ev = dense_oracle(leaf.kernel, math.exp(leaf.log_noise), leaf.X, leaf.y, Xs)
    pm = leaf.predict(Xs)
    np.testing.assert_allclose(pm.mean, mean, rtol=1e-8)
    np.testing.assert_allclose(pm.var_f, np.maximum(var, 0), rtol=1e-8, atol=1e-14)
    np.testing.assert_allclose(pm.var_y, pm.var_f + leaf.noise_var, rtol=1e-15)
    assert leaf.log_evidence == pytest.approx(ev, abs=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 50), st.integers(1, 3), st.sampled_from([SE_ARD, MATERN, LINEAR]),
       st.integers(0, 10**6))
def test_evidence_matches_oracle(n, D, family, seed):
    leaf = make_leaf(n, D, family, noise=0.5, seed=seed).fit()
    _, _, ev = dense_oracle(leaf.kernel, 0.5, leaf.X, leaf.y, leaf.X[:1])
    assert abs(leaf.log_evidence - ev) < 1e-8


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(0, 10**6))
def test_variance_preclamp_bound(n, seed):
    leaf = make_leaf(n, 2, noise=0.2, seed=seed).fit()
    C = kernel_matrix(leaf.kernel, leaf.X) + leaf.noise_var * np.eye(n)
    if np.linalg.cond(C) >= 1e8:
        return
    Xs = np.random.default_rng(seed + 1).uniform(-2, 2, (10, 2))
    from scipy.linalg import solve_triangular
    Ks = kernel_matrix(leaf.kernel, Xs, leaf.X)
    v = solve_triangular(leaf.cache.L, Ks.T, lower=True)
    raw = leaf.kernel.signal_variance - np.einsum("ij,ij->j", v, v)
    assert raw.min() >= -1e-6 * leaf.kernel.signal_variance
    pm = leaf.predict(Xs)
    assert np.all(pm.var_f >= 0) and np.all(pm.var_y >= pm.var_f)


def test_refit_is_bit_identical():
    leaf = make_leaf(25, 2, seed=7).fit()
    Xs = np.random.default_rng(8).normal(size=(6, 2))
    a = leaf.predict(Xs)
    leaf.invalidate()
    leaf.fit()
    b = leaf.predict(Xs)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.var_f, b.var_f)


def test_overlap_rows_excluded_from_evidence():
    base = make_leaf(30, 2, seed=9)
    own = GpLeaf(base.kernel, base.log_noise, base.X[:22], base.y[:22]).fit()
    with_ovl = GpLeaf(base.kernel, base.log_noise, base.X, base.y, overlap_count=8).fit()
    assert with_ovl.log_evidence == own.log_evidence
    Xs = base.X[22:] + 0.01
    assert not np.allclose(with_ovl.predict(Xs).mean, own.predict(Xs).mean)


def test_unfitted_leaf_is_a_state_error():
    leaf = make_leaf(5, 1)
    with pytest.raises(StateError):
        leaf.predict(np.zeros((1, 1)))
    with pytest.raises(StateError):
        leaf.log_marginal_likelihood_grad()


def test_jitter_rescues_singular_matrix():
    spec = KernelSpec.create(SE_ARD, 1, sigma_f=1.0, lengthscale=1.0)
    X = np.zeros((4, 1))  # four identical inputs, rank one
    C = kernel_matrix(spec, X)
    L, jitter = cholesky_with_jitter(C, 1.0)
    assert jitter > 0
    np.testing.assert_allclose(L @ L.T, C + jitter * np.eye(4), atol=1e-12)


def test_factorization_failure_names_the_region():
    with pytest.raises(NumericalError, match="region-7"):
        cholesky_with_jitter(-np.eye(3), 1.0, tag="region-7")


def _fd_evidence(leaf, h=1e-5):
    theta = leaf.log_params
    g = np.zeros_like(theta)
    for p in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[p] += h
        dn[p] -= h
        n = leaf.n_own
        fu = evidence_and_grad(leaf.kernel.with_log_params(up[:-1]), up[-1], leaf.X[:n], leaf.y[:n])[0]
        fd = evidence_and_grad(leaf.kernel.with_log_params(dn[:-1]), dn[-1], leaf.X[:n], leaf.y[:n])[0]
        g[p] = (fu - fd) / (2 * h)
    return g


@pytest.mark.parametrize("family", [SE_ARD, LINEAR, MATERN, PERIODIC])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_evidence_gradient_finite_differences(family, seed):
    D = 1 if family == PERIODIC else 2
    leaf = make_leaf(20, D, family, seed=seed, overlap=3).fit()
    g = leaf.log_marginal_likelihood_grad()
    fd = _fd_evidence(leaf)
    assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-8)) < 1e-4


def test_sigma_f_gradient_positive_when_underfitting():
    rng = np.random.default_rng(12)
    X = rng.uniform(0, 20, (15, 1))
    y = 10.0 * rng.standard_normal(15)  # variance far above k(x,x) + noise = 2
    leaf = GpLeaf(KernelSpec(SE_ARD, (0.0, 0.0), 1), 0.0, X, y).fit()
    assert leaf.log_marginal_likelihood_grad()[0] > 0


def test_evidence_and_grad_agrees_with_fit():
    leaf = make_leaf(30, 2, seed=13).fit()
    ev, _ = evidence_and_grad(leaf.kernel, leaf.log_noise, leaf.X, leaf.y)
    assert ev == leaf.log_evidence
