"""Exact GP experts: Cholesky-based conditioning, predictive moments and evidence."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .kernels import KernelSpec, kernel_diag, kernel_matrix, kernel_matrix_and_grad

LOG_2PI = math.log(2.0 * math.pi)

JITTER_START = 1e-8
JITTER_ESCALATIONS = 3


class NumericalError(RuntimeError):
    """Factorization failed even after jitter escalation."""


class StateError(RuntimeError):
    """Operation requested on an object in the wrong lifecycle state."""


@dataclass
class PredictiveMoments:
    mean: np.ndarray
    var_f: np.ndarray
    var_y: np.ndarray

    def var(self, target: str = "latent_f") -> np.ndarray:
        if target == "latent_f":
            return self.var_f
        if target == "observed_y":
            return self.var_y
        raise ValueError(f"unknown target {target!r}")


def cholesky_with_jitter(C: np.ndarray, base: float, tag=None):
    """Lower Cholesky factor of C, adding diagonal jitter only if needed.

    Jitter starts at ``1e-8 * base`` and is multiplied by 10 at most
    ``JITTER_ESCALATIONS`` times.  Returns ``(L, jitter_used)``.
    """
    try:
        return linalg.cholesky(C, lower=True, check_finite=False), 0.0
    except linalg.LinAlgError:
        pass
    jitter = JITTER_START * base
    n = C.shape[0]
    for _ in range(JITTER_ESCALATIONS + 1):
        try:
            return linalg.cholesky(C + jitter * np.eye(n), lower=True, check_finite=False), jitter
        except linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalError(f"Cholesky failed after jitter escalation (leaf/region {tag})")


@dataclass
class _Factor:
    L: np.ndarray
    alpha: np.ndarray
    jitter: float


@dataclass
class GpLeaf:
    """A single GP expert conditioned on a block of training rows.

    The trailing ``overlap_count`` rows of ``X``/``y`` are borrowed from
    neighbouring regions: they condition the predictive distribution but
    are left out of ``log_evidence``.
    """

    kernel: KernelSpec
    log_noise: float
    X: np.ndarray
    y: np.ndarray
    overlap_count: int = 0
    data_idx: np.ndarray | None = None
    overlap_idx: np.ndarray | None = None
    tag: object = None
    cache: _Factor | None = field(default=None, repr=False)
    log_evidence: float | None = None
    clamp_count: int = 0

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float).reshape(-1, self.kernel.input_dim)
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"X has {self.X.shape[0]} rows but y has {self.y.shape[0]}")
        if not 0 <= self.overlap_count <= self.X.shape[0]:
            raise ValueError("overlap_count out of range")

    @property
    def noise_var(self) -> float:
        return math.exp(2.0 * self.log_noise)

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_own(self) -> int:
        return self.X.shape[0] - self.overlap_count

    @property
    def fitted(self) -> bool:
        return self.log_evidence is not None

    @property
    def log_params(self) -> np.ndarray:
        """Kernel log-params followed by log noise."""
        return np.append(self.kernel.log_params, self.log_noise)

    def set_log_params(self, theta) -> "GpLeaf":
        theta = np.asarray(theta, dtype=float)
        self.kernel = self.kernel.with_log_params(theta[:-1])
        self.log_noise = float(theta[-1])
        self.invalidate()
        return self

    def invalidate(self):
        self.cache = None
        self.log_evidence = None

    def _factor(self, X, y) -> _Factor:
        C = kernel_matrix(self.kernel, X)
        C[np.diag_indices_from(C)] += self.noise_var
        L, jitter = cholesky_with_jitter(C, self.kernel.signal_variance, self.tag)
        alpha = linalg.cho_solve((L, True), y, check_finite=False)
        return _Factor(L, alpha, jitter)

    def fit(self) -> "GpLeaf":
        """Factorize ``C = K + noise*I`` and compute the log evidence of the own rows."""
        if self.n_rows == 0:
            self.cache = _Factor(np.zeros((0, 0)), np.zeros(0), 0.0)
            self.log_evidence = 0.0
            return self
        self.cache = self._factor(self.X, self.y)
        if self.overlap_count:
            own = self._factor(self.X[: self.n_own], self.y[: self.n_own]) if self.n_own else None
        else:
            own = self.cache
        self.log_evidence = 0.0 if own is None else _log_evidence(own, self.y[: self.n_own])
        return self

    def predict(self, Xstar) -> PredictiveMoments:
        if self.cache is None:
            raise StateError(f"leaf {self.tag} is not fitted")
        Xstar = np.asarray(Xstar, dtype=float).reshape(-1, self.kernel.input_dim)
        prior_var = kernel_diag(self.kernel, Xstar)
        if self.n_rows == 0:
            mean = np.zeros(Xstar.shape[0])
            var_f = prior_var
        else:
            Ks = kernel_matrix(self.kernel, Xstar, self.X)
            mean = Ks @ self.cache.alpha
            v = linalg.solve_triangular(self.cache.L, Ks.T, lower=True, check_finite=False)
            var_f = prior_var - np.einsum("ij,ij->j", v, v)
            neg = var_f < 0
            if neg.any():
                self.clamp_count += int(neg.sum())
                var_f = np.where(neg, 0.0, var_f)
        return PredictiveMoments(mean, var_f, var_f + self.noise_var)

    def log_marginal_likelihood_grad(self) -> np.ndarray:
        """Gradient of ``log_evidence`` w.r.t. (kernel log-params, log noise)."""
        if not self.fitted:
            raise StateError(f"leaf {self.tag} is not fitted")
        n = self.n_own
        if n == 0:
            return np.zeros(self.kernel.n_params + 1)
        return evidence_and_grad(self.kernel, self.log_noise, self.X[:n], self.y[:n], self.tag)[1]


def cholesky_inverse(L: np.ndarray) -> np.ndarray:
    """Symmetric inverse of ``L @ L.T`` from its lower Cholesky factor."""
    inv, info = linalg.lapack.dpotri(L, lower=1)
    if info != 0:
        raise NumericalError(f"dpotri failed with info={info}")
    return np.tril(inv) + np.tril(inv, -1).T


def evidence_and_grad(kernel: KernelSpec, log_noise: float, X, y, tag=None):
    """Log evidence and its gradient from one factorization.

    Component p of the gradient is ``0.5 * tr((a a^T - C^-1) dC/dtheta_p)``
    with ``a = C^-1 y``; the noise derivative is ``2 * noise_var * I``.
    """
    n = X.shape[0]
    noise_var = math.exp(2.0 * log_noise)
    C, dK = kernel_matrix_and_grad(kernel, X)
    C[np.diag_indices_from(C)] += noise_var
    L, _ = cholesky_with_jitter(C, kernel.signal_variance, tag)
    Cinv = cholesky_inverse(L)
    alpha = linalg.cho_solve((L, True), y, check_finite=False)
    W = np.outer(alpha, alpha) - Cinv
    grad = [0.5 * np.einsum("ij,ij->", W, g) for g in dK]
    grad.append(np.trace(W) * noise_var)
    ev = float(-0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * LOG_2PI)
    return ev, np.asarray(grad)


def _log_evidence(f: _Factor, y: np.ndarray) -> float:
    n = y.shape[0]
    return float(-0.5 * y @ f.alpha - np.log(np.diag(f.L)).sum() - 0.5 * n * LOG_2PI)


def fit(leaf: GpLeaf) -> GpLeaf:
    return leaf.fit()


def predict(leaf: GpLeaf, Xstar) -> PredictiveMoments:
    return leaf.predict(Xstar)


def log_marginal_likelihood_grad(leaf: GpLeaf) -> np.ndarray:
    return leaf.log_marginal_likelihood_grad()
