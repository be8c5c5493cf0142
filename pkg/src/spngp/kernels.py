"""Covariance functions with hyperparameters stored in log space.

Every kernel exposes the same three entry points: pointwise evaluation,
a dense Gram matrix, and the Gram-matrix derivatives with respect to each
log-hyperparameter.  Distances are always built from per-dimension
differences so that ``k(a, b)`` and ``k(b, a)`` run through identical
floating-point operations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LINEAR = "linear"
SE_ARD = "se_ard"
MATERN = "matern"
PERIODIC = "periodic"

FAMILIES = (LINEAR, SE_ARD, MATERN, PERIODIC)
MATERN_NUS = (0.5, 1.5, 2.5)

_ALIASES = {
    "lin": LINEAR,
    "linear": LINEAR,
    "se": SE_ARD,
    "se_ard": SE_ARD,
    "rbf": SE_ARD,
    "squared_exponential": SE_ARD,
    "matern": MATERN,
    "periodic": PERIODIC,
}


class KernelError(ValueError):
    """Bad kernel arguments: dimension mismatch, non-finite input, bad params."""


def canonical_family(name: str) -> str:
    try:
        return _ALIASES[name.lower()]
    except KeyError:
        raise KernelError(f"unknown kernel family {name!r}") from None


def n_params(family: str, input_dim: int) -> int:
    if family == LINEAR:
        return 1
    if family in (SE_ARD, MATERN):
        return 1 + input_dim
    if family == PERIODIC:
        return 3
    raise KernelError(f"unknown kernel family {family!r}")


@dataclass(frozen=True)
class KernelSpec:
    """A kernel family plus its log-hyperparameters.

    Parameter layout:

    * ``linear``: ``(log sigma_f,)``
    * ``se_ard`` / ``matern``: ``(log sigma_f, log l_1, ..., log l_D)``
    * ``periodic``: ``(log sigma_f, log lengthscale, log period)``; 1-D only
    """

    family: str
    log_params: tuple[float, ...]
    input_dim: int
    nu: float = 1.5

    def __post_init__(self):
        fam = canonical_family(self.family)
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "log_params", tuple(float(p) for p in self.log_params))
        if self.input_dim < 1:
            raise KernelError("input_dim must be positive")
        if fam == PERIODIC and self.input_dim != 1:
            raise KernelError("periodic kernel supports 1-D inputs only")
        if fam == MATERN and self.nu not in MATERN_NUS:
            raise KernelError(f"matern nu must be one of {MATERN_NUS}, got {self.nu}")
        if len(self.log_params) != n_params(fam, self.input_dim):
            raise KernelError(
                f"{fam} with input_dim={self.input_dim} needs "
                f"{n_params(fam, self.input_dim)} params, got {len(self.log_params)}"
            )
        with np.errstate(over="ignore"):
            vals = np.exp(self.log_params)
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
            raise KernelError(f"hyperparameters must be positive and finite: {vals}")

    @classmethod
    def create(cls, family, input_dim, sigma_f=1.0, lengthscale=1.0, period=1.0, nu=1.5):
        """Build a spec from natural-scale values (lengthscale may be per-dimension)."""
        family = canonical_family(family)
        p = [math.log(sigma_f)]
        if family in (SE_ARD, MATERN):
            ls = np.broadcast_to(np.asarray(lengthscale, dtype=float), (input_dim,))
            p.extend(np.log(ls).tolist())
        elif family == PERIODIC:
            p.extend([math.log(float(lengthscale)), math.log(period)])
        return cls(family, tuple(p), input_dim, nu)

    @property
    def params(self) -> np.ndarray:
        return np.exp(np.asarray(self.log_params))

    @property
    def n_params(self) -> int:
        return len(self.log_params)

    @property
    def signal_variance(self) -> float:
        return math.exp(2.0 * self.log_params[0])

    def with_log_params(self, log_params) -> "KernelSpec":
        return KernelSpec(self.family, tuple(log_params), self.input_dim, self.nu)

    @property
    def label(self) -> str:
        return f"matern{int(2 * self.nu)}2" if self.family == MATERN else self.family

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "log_params": list(self.log_params),
            "input_dim": self.input_dim,
            "nu": self.nu,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(d["family"], tuple(d["log_params"]), int(d["input_dim"]), float(d.get("nu", 1.5)))


def _check(spec: KernelSpec, X: np.ndarray, name: str) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise KernelError(f"{name} has shape {X.shape}, expected (*, {spec.input_dim})")
    if not np.all(np.isfinite(X)):
        raise KernelError(f"{name} contains non-finite entries")
    return X


def _scaled_sqdist(X1, X2, lengthscales):
    """Per-dimension scaled squared differences, shape (D, N1, N2)."""
    diffs = np.empty((X1.shape[1], X1.shape[0], X2.shape[0]))
    for d, l in enumerate(lengthscales):
        diffs[d] = ((X1[:, d, None] - X2[None, :, d]) / l) ** 2
    return diffs


def _matern_profile(r, nu):
    """Matern correlation as a function of scaled distance r."""
    if nu == 0.5:
        return np.exp(-r)
    if nu == 1.5:
        s = math.sqrt(3.0) * r
        return (1.0 + s) * np.exp(-s)
    s = math.sqrt(5.0) * r
    return (1.0 + s + s * s / 3.0) * np.exp(-s)


def _matrix_and_grads(spec: KernelSpec, X1, X2, want_grad):
    p = spec.params
    sf2 = p[0] ** 2
    fam = spec.family
    if fam == LINEAR:
        K = sf2 * (X1 @ X2.T) if X1.shape[1] > 1 else sf2 * (X1[:, 0, None] * X2[None, :, 0])
        return K, ([2.0 * K] if want_grad else None)

    if fam == SE_ARD:
        sq = _scaled_sqdist(X1, X2, p[1:])
        E = np.exp(-0.5 * sq.sum(axis=0))
        K = sf2 * E
        if not want_grad:
            return K, None
        return K, [2.0 * K] + [K * sq[d] for d in range(spec.input_dim)]

    if fam == MATERN:
        sq = _scaled_sqdist(X1, X2, p[1:])
        r = np.sqrt(sq.sum(axis=0))
        K = sf2 * _matern_profile(r, spec.nu)
        if not want_grad:
            return K, None
        # dk/dlog l_d = -dk/dr * sq_d / r, written in a form that is finite at r = 0
        if spec.nu == 0.5:
            with np.errstate(divide="ignore", invalid="ignore"):
                coef = np.where(r > 0, sf2 * np.exp(-r) / np.where(r > 0, r, 1.0), 0.0)
        elif spec.nu == 1.5:
            coef = 3.0 * sf2 * np.exp(-math.sqrt(3.0) * r)
        else:
            s = math.sqrt(5.0) * r
            coef = (5.0 / 3.0) * sf2 * (1.0 + s) * np.exp(-s)
        return K, [2.0 * K] + [coef * sq[d] for d in range(spec.input_dim)]

    # periodic
    ell, period = p[1], p[2]
    dist = np.abs(X1[:, 0, None] - X2[None, :, 0])
    u = math.pi * dist / period
    sin2 = np.sin(u) ** 2
    K = sf2 * np.exp(-2.0 * sin2 / ell**2)
    if not want_grad:
        return K, None
    g_ell = K * 4.0 * sin2 / ell**2
    g_per = K * (2.0 / ell**2) * np.sin(2.0 * u) * u
    return K, [2.0 * K, g_ell, g_per]


def kernel_matrix(spec: KernelSpec, X1, X2=None) -> np.ndarray:
    """Gram matrix ``K[i, j] = k(X1[i], X2[j])``; ``X2`` defaults to ``X1``."""
    X1 = _check(spec, X1, "X1")
    X2 = X1 if X2 is None else _check(spec, X2, "X2")
    return _matrix_and_grads(spec, X1, X2, False)[0]


def kernel_eval(spec: KernelSpec, x1, x2) -> float:
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x1.ndim > 1 or x2.ndim > 1:
        raise KernelError("kernel_eval takes single input vectors")
    return float(kernel_matrix(spec, x1.reshape(1, -1), x2.reshape(1, -1))[0, 0])


def kernel_diag(spec: KernelSpec, X) -> np.ndarray:
    """``k(x, x)`` for every row of X."""
    X = _check(spec, X, "X")
    if spec.family == LINEAR:
        return spec.signal_variance * np.einsum("ij,ij->i", X, X)
    return np.full(X.shape[0], spec.signal_variance)


def kernel_grad(spec: KernelSpec, X) -> list[np.ndarray]:
    """``dK/dlog(param_p)`` at ``K(X, X)``, one matrix per hyperparameter."""
    X = _check(spec, X, "X")
    return _matrix_and_grads(spec, X, X, True)[1]


def kernel_matrix_and_grad(spec: KernelSpec, X):
    X = _check(spec, X, "X")
    return _matrix_and_grads(spec, X, X, True)
