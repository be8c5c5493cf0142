"""Baseline regressors, RMSE, and the repeated-split evaluation protocol."""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, split

RIDGE_ALPHA = 0.01
FULL_GP_CAP_ENV = "SPNGP_FULL_GP_CAP"
DEFAULT_FULL_GP_CAP = 5000


def rmse(pred, truth) -> tuple[np.ndarray, float]:
    """Per-output RMSE and the RMSE pooled over all outputs."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.ndim == 1:
        pred, truth = pred[:, None], truth[:, None]
    sq = (pred - truth) ** 2
    return np.sqrt(sq.mean(axis=0)), float(np.sqrt(sq.mean()))


def mean_baseline(train: Dataset, Xtest) -> np.ndarray:
    return np.tile(train.Y.mean(axis=0), (np.asarray(Xtest).shape[0], 1))


def lls_fit(X, Y) -> np.ndarray:
    """Least squares with intercept; coefficient rows are (intercept, w_1..w_D).

    SVD-based, so rank-deficient designs get the minimum-norm solution.
    """
    A = np.column_stack([np.ones(X.shape[0]), X])
    coef, *_ = np.linalg.lstsq(A, Y, rcond=None)
    return coef


def lls_baseline(train: Dataset, Xtest) -> np.ndarray:
    coef = lls_fit(train.X, train.Y)
    return np.column_stack([np.ones(len(Xtest)), Xtest]) @ coef


def ridge_fit(X, Y, alpha: float = RIDGE_ALPHA):
    """Ridge on standardized features with an unpenalized intercept.

    Returns ``(w, b)`` on the original feature scale: ``Y ~ X @ w + b``.
    """
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Z = (X - mu) / sd
    ybar = Y.mean(axis=0)
    G = Z.T @ Z + alpha * np.eye(Z.shape[1])
    beta = np.linalg.solve(G, Z.T @ (Y - ybar))
    w = beta / sd[:, None]
    return w, ybar - mu @ w


def ridge_baseline(train: Dataset, Xtest, alpha: float = RIDGE_ALPHA) -> np.ndarray:
    w, b = ridge_fit(train.X, train.Y, alpha)
    return np.asarray(Xtest) @ w + b


def baselines(train: Dataset, test: Dataset, alpha: float = RIDGE_ALPHA) -> dict[str, np.ndarray]:
    return {
        "Mean": mean_baseline(train, test.X),
        "LLS": lls_baseline(train, test.X),
        "Ridge": ridge_baseline(train, test.X, alpha),
    }


def full_gp_cap(default: int = DEFAULT_FULL_GP_CAP) -> int:
    raw = os.environ.get(FULL_GP_CAP_ENV)
    return int(raw) if raw else default


@dataclass
class MethodResult:
    pooled: list = field(default_factory=list)
    per_output: list = field(default_factory=list)
    skipped: str = ""

    @property
    def runs(self) -> int:
        return len(self.pooled)

    @property
    def mean(self) -> float:
        return float(np.mean(self.pooled)) if self.pooled else math.nan

    @property
    def stderr(self) -> float:
        """Sample standard deviation over runs divided by sqrt(R); 0 for a single run."""
        if len(self.pooled) < 2:
            return 0.0
        return float(np.std(self.pooled, ddof=1) / math.sqrt(len(self.pooled)))


@dataclass
class EvalReport:
    dataset: str
    fingerprint: str
    seeds: list
    methods: dict
    preprocessing: str
    notes: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    def to_dict(self, with_timing: bool = False) -> dict:
        d = {
            "dataset": self.dataset,
            "fingerprint": self.fingerprint,
            "seeds": list(self.seeds),
            "preprocessing": self.preprocessing,
            "notes": list(self.notes),
            "methods": {
                name: {
                    "rmse_mean": r.mean,
                    "rmse_stderr": r.stderr,
                    "runs": r.runs,
                    "pooled": list(r.pooled),
                    "per_output": [list(map(float, p)) for p in r.per_output],
                    "skipped": r.skipped,
                }
                for name, r in self.methods.items()
            },
        }
        if with_timing:
            d["timing"] = self.timing
        return d

    def table(self) -> str:
        lines = [f"{'Method':<12}{'RMSE':>10}{'stderr':>10}{'runs':>6}", "-" * 38]
        for name, r in self.methods.items():
            if r.skipped:
                lines.append(f"{name:<12}{'-':>10}{'-':>10}{0:>6}   ({r.skipped})")
            else:
                lines.append(f"{name:<12}{r.mean:>10.4f}{r.stderr:>10.4f}{r.runs:>6}")
        return "\n".join(lines)

    def csv_rows(self) -> list[list]:
        rows = [["method", "rmse_mean", "rmse_stderr", "runs", "per_run", "skipped"]]
        for name, r in self.methods.items():
            rows.append([name, repr(r.mean), repr(r.stderr), r.runs,
                         ";".join(repr(float(v)) for v in r.pooled), r.skipped])
        return rows


def run_seeds(seed: int, runs: int) -> list[int]:
    return [seed + r for r in range(runs)]


def evaluate(dataset: Dataset, cfg, name: str = "dataset", jobs: int = 1) -> EvalReport:
    """Mean/LLS/Ridge/full GP/SPN-GP/SPN-GP* over ``cfg.runs`` seeded splits."""
    from .pipeline import fit_full_gp, train_model

    seeds = run_seeds(cfg.seed, cfg.eval.runs)
    methods = {m: MethodResult() for m in ("Mean", "LLS", "Ridge", "GP", "SPN-GP")}
    if cfg.eval.overlap_variant:
        methods["SPN-GP*"] = MethodResult()
    timing: dict[str, float] = {}
    notes = []
    cap = full_gp_cap(cfg.full_gp.cap)

    def clock(key, t0):
        timing[key] = timing.get(key, 0.0) + time.perf_counter() - t0

    for s in seeds:
        train, test = split(dataset, cfg.eval.train_fraction, s)
        t0 = time.perf_counter()
        for m, pred in baselines(train, test).items():
            per, pooled = rmse(pred, test.Y)
            methods[m].pooled.append(pooled)
            methods[m].per_output.append(per)
        clock("baselines", t0)

        if not cfg.full_gp.enabled:
            methods["GP"].skipped = "disabled"
        elif train.n > cap:
            methods["GP"].skipped = f"N_train={train.n} exceeds feasibility cap {cap}"
        else:
            t0 = time.perf_counter()
            pred = fit_full_gp(train, test.X, cfg)
            per, pooled = rmse(pred, test.Y)
            methods["GP"].pooled.append(pooled)
            methods["GP"].per_output.append(per)
            clock("full_gp", t0)

        variants = [("SPN-GP", "none")]
        if cfg.eval.overlap_variant:
            variants.append(("SPN-GP*", "count" if cfg.structure.overlap == "none" else cfg.structure.overlap))
        for label, overlap in variants:
            t0 = time.perf_counter()
            model, _ = train_model(train, cfg, seed=s, overlap=overlap, jobs=jobs)
            pred = np.column_stack([pm.mean for pm in model.predict(test.X)])
            per, pooled = rmse(pred, test.Y)
            methods[label].pooled.append(pooled)
            methods[label].per_output.append(per)
            clock(label, t0)

    if methods["GP"].skipped:
        notes.append(f"GP skipped: {methods['GP'].skipped}")
    pre = "targets centred by the training mean inside GP/SPN-GP models; no feature scaling " \
          "(Ridge standardizes features internally)"
    return EvalReport(name, dataset.fingerprint, seeds, methods, pre, notes, timing)
