"""Datasets: CSV ingestion, fingerprints, seeded splits and synthetic generators."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MISSING = {"", "na", "nan", "n/a", "null", "none", "?"}


class DataError(ValueError):
    pass


def fingerprint(X, Y) -> str:
    h = hashlib.sha256()
    for a in (X, Y):
        a = np.ascontiguousarray(a, dtype="<f8")
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    feature_names: list = field(default_factory=list)
    target_names: list = field(default_factory=list)
    n_rejected: int = 0

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.Y = np.asarray(self.Y, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]
        if self.X.shape[0] != self.Y.shape[0]:
            raise DataError("X and Y row counts differ")
        if self.X.shape[0] < 1:
            raise DataError("dataset is empty")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.Y))):
            raise DataError("dataset contains non-finite values")
        if not self.feature_names:
            self.feature_names = [f"x{i + 1}" for i in range(self.X.shape[1])]
        if not self.target_names:
            self.target_names = [f"y{i + 1}" for i in range(self.Y.shape[1])]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.X, self.Y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.Y[idx], list(self.feature_names), list(self.target_names))


def load_csv(path, targets, delimiter: str = ",") -> Dataset:
    """Read a headered numeric CSV.  ``targets`` are column names (or indices).

    Rows with missing or non-finite cells are dropped and counted; any other
    unparseable cell raises :class:`DataError` naming its data row (1-based)
    and column.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh, delimiter=delimiter))
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if isinstance(targets, (str, int)):
        targets = [targets]
    tcols = []
    for t in targets:
        if isinstance(t, int):
            tcols.append(t % len(header))
        elif t in header:
            tcols.append(header.index(t))
        else:
            raise DataError(f"{path}: target column {t!r} not in header {header}")
    fcols = [i for i in range(len(header)) if i not in tcols]

    values, rejected = [], 0
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
        parsed = []
        missing = False
        for c, cell in enumerate(row):
            cell = cell.strip()
            if cell.lower() in MISSING:
                missing = True
                continue
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {r}, column {header[c]!r}: cannot parse {cell!r}") from None
            if not math.isfinite(v):
                missing = True
            parsed.append(v)
        if missing:
            rejected += 1
            continue
        values.append(parsed)
    if not values:
        raise DataError(f"{path}: no complete data rows")
    A = np.array(values, dtype=float)
    return Dataset(A[:, fcols], A[:, tcols], [header[i] for i in fcols],
                   [header[i] for i in tcols], n_rejected=rejected)


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(dataset.n)
    n_train = min(max(int(round(train_fraction * dataset.n)), 1), dataset.n - 1)
    return dataset.subset(np.sort(perm[:n_train])), dataset.subset(np.sort(perm[n_train:]))


# --------------------------------------------------------------------------
# synthetic generators

PIECEWISE_BREAK = 30.0
PIECEWISE_NOISE = 0.37
PIECEWISE_NOISE_SCALE = (1.0, 1.5)


def piecewise_truth(x) -> np.ndarray:
    """Latent function: a line through the origin on [0, 30), an oscillation on [30, 60].

    The oscillatory half is offset so that the two halves have opposite
    means and the whole series is roughly zero-mean.
    """
    x = np.asarray(x, dtype=float)
    lin = 0.2 * x
    osc = -3.0 + 2.0 * np.sin(2.0 * np.pi * x / 7.5)
    return np.where(x < PIECEWISE_BREAK, lin, osc)


def piecewise_noise(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    lo, hi = PIECEWISE_NOISE_SCALE
    return PIECEWISE_NOISE * np.where(x < PIECEWISE_BREAK, lo, hi)


def gen_piecewise(seed: int, n: int) -> Dataset:
    """1-D series on a regular time grid over [0, 60] with a linear and an oscillatory regime.

    The seed only drives the observation noise.
    """
    if n < 10:
        raise ValueError("n must be >= 10")
    rng = np.random.default_rng(seed)
    x = np.linspace(0.0, 60.0, n)
    y = piecewise_truth(x) + piecewise_noise(x) * rng.standard_normal(n)
    return Dataset(x[:, None], y[:, None], ["x"], ["y"])


HETERO_RANGE = (0.0, 10.0)
HETERO_NOISE_MIN = 0.05
HETERO_NOISE_MAX = 1.0


def heteroscedastic_truth(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.sin(1.5 * x) + 0.3 * x


def heteroscedastic_noise(x) -> np.ndarray:
    """Noise standard deviation ``0.05 * 20**(x/10)``: 0.05 at x=0 rising to 1.0 at x=10."""
    x = np.asarray(x, dtype=float)
    lo, hi = HETERO_RANGE
    return HETERO_NOISE_MIN * (HETERO_NOISE_MAX / HETERO_NOISE_MIN) ** ((x - lo) / (hi - lo))


def gen_heteroscedastic(seed: int, n: int) -> tuple[Dataset, np.ndarray]:
    """Smooth latent function with input-dependent noise; also returns the true noise sd per row."""
    if n < 10:
        raise ValueError("n must be >= 10")
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(*HETERO_RANGE, n))
    sd = heteroscedastic_noise(x)
    y = heteroscedastic_truth(x) + sd * rng.standard_normal(n)
    return Dataset(x[:, None], y[:, None], ["x"], ["y"]), sd


def smooth_truth(X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.sin(3.0 * X[:, 0]) * np.cos(2.0 * X[:, 1]) + 0.5 * X[:, 0] * X[:, 1]


def gen_smooth(seed: int, n: int, noise: float = 0.1) -> Dataset:
    """2-D smooth surface on the unit square with homoscedastic noise."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, (n, 2))
    y = smooth_truth(X) + noise * rng.standard_normal(n)
    return Dataset(X, y[:, None], ["x1", "x2"], ["y"])


def gen_energy_like(seed: int, n: int = 768) -> Dataset:
    """Synthetic stand-in with the Energy table shape (8 inputs, 2 targets).

    Only for exercising the multi-output pipeline; carries no relation to
    the real measurements.
    """
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, (n, 8))
    base = 10 * X[:, 0] + 5 * np.sin(3 * X[:, 1]) + 4 * X[:, 4] * X[:, 6]
    Y = np.column_stack([base + rng.normal(0, 0.5, n), 0.8 * base + 3 * X[:, 2] + rng.normal(0, 0.5, n)])
    return Dataset(X, Y, [f"X{i + 1}" for i in range(8)], ["Y1", "Y2"])


GENERATORS = {
    "piecewise": lambda seed, n: gen_piecewise(seed, n),
    "heteroscedastic": lambda seed, n: gen_heteroscedastic(seed, n)[0],
    "smooth": lambda seed, n: gen_smooth(seed, n),
    "energy_like": lambda seed, n: gen_energy_like(seed, n),
}


def write_csv(path, dataset: Dataset, delimiter: str = ","):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(list(dataset.feature_names) + list(dataset.target_names))
        for x, y in zip(dataset.X, dataset.Y):
            w.writerow([repr(float(v)) for v in x] + [repr(float(v)) for v in y])
