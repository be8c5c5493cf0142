"""End-to-end training, baseline GP, expert-size sweep and output writers."""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import io
import json
import math
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bench import rmse
from .config import ConfigError, ExperimentConfig
from .data import GENERATORS, Dataset, load_csv, split
from .gp import GpLeaf
from .hyperopt import OptimizerConfig, optimize_leaf, optimize_model
from .kernels import KernelSpec
from .spn import SpnGp, map_leaves, validate
from .structure import KernelTemplate, assign_overlap, build_region_graph, build_spn, complexity_report

BAND_Z = 1.96


class PhaseError(RuntimeError):
    """A pipeline step failed; ``phase`` names the step."""

    def __init__(self, phase: str, err: Exception):
        super().__init__(f"[{phase}] {type(err).__name__}: {err}")
        self.phase = phase
        self.__cause__ = err


class Timer:
    def __init__(self):
        self.times: dict[str, float] = {}

    @contextlib.contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        except PhaseError:
            raise
        except Exception as e:
            raise PhaseError(name, e) from e
        finally:
            self.times[name] = self.times.get(name, 0.0) + time.perf_counter() - t0


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    if d.generator is not None:
        if d.generator not in GENERATORS:
            raise ConfigError(f"unknown generator {d.generator!r}; known: {sorted(GENERATORS)}")
        return GENERATORS[d.generator](cfg.seed, int(d.n))
    path = cfg.resolve(d.path)
    if not path.exists():
        raise ConfigError(f"data file {path} does not exist")
    return load_csv(path, d.targets, d.delimiter)


def train_model(train: Dataset, cfg: ExperimentConfig, seed: int | None = None,
                overlap: str | None = None, jobs: int = 1, optimize: bool | None = None,
                structure=None, verbose: bool = False, timer: Timer | None = None):
    """Region graph, SPN assembly, overlap, leaf fits, optimization and posterior update.

    Returns ``(model, info)`` where ``info`` holds the evidence before and
    after optimization.
    """
    seed = cfg.seed if seed is None else seed
    scfg = structure if structure is not None else cfg.structure_for(seed, overlap)
    timer = timer or Timer()
    info = {}
    with timer.phase("build_region_graph"):
        graph = build_region_graph(train.X, scfg)
    with timer.phase("build_spn"):
        model = build_spn(graph, train.X, train.Y, scfg)
        model.fingerprint = train.fingerprint
    if scfg.overlap != "none":
        with timer.phase("assign_overlap"):
            assign_overlap(model, scfg)
    with timer.phase("fit_leaves"):
        model.fit_leaves(jobs)
        info["log_evidence_init"] = model.log_evidence()
    if cfg.optimizer.enabled if optimize is None else optimize:
        with timer.phase("optimize_model"):
            optimize_model(model, cfg.optimizer.build(seed, verbose), jobs)
    with timer.phase("posterior_update"):
        info["log_evidence"] = model.log_evidence()
        model.posterior_update()
    return model, info


def _parent_weights(model: SpnGp) -> dict[int, float]:
    w = {}
    for s in model.sums():
        for c, lw in zip(s.child_ids, s.log_weights):
            w[c] = math.exp(float(lw))
    return w


def leaf_table(model: SpnGp) -> list[dict]:
    pw = _parent_weights(model)
    rows = []
    for leaf in sorted(model.leaves(), key=lambda l: l.id):
        gp = leaf.gp
        rows.append({
            "leaf": leaf.id,
            "region": leaf.region.id,
            "output": leaf.output,
            "kernel": gp.kernel.label,
            "params": gp.kernel.params.tolist(),
            "sigma_eps": math.exp(gp.log_noise),
            "n_own": gp.n_own,
            "n_overlap": gp.overlap_count,
            "log_evidence": gp.log_evidence,
            "weight": pw.get(leaf.id, 1.0),
            "lower": leaf.region.lower.tolist(),
            "upper": leaf.region.upper.tolist(),
        })
    return rows


def train_report(model: SpnGp, info: dict, cfg: ExperimentConfig, dataset: Dataset) -> dict:
    return {
        "library_version": __version__,
        "config_fingerprint": cfg.fingerprint,
        "seed": cfg.seed,
        "data_fingerprint": dataset.fingerprint,
        "n_rows": dataset.n,
        "n_rejected_rows": dataset.n_rejected,
        "feature_names": list(dataset.feature_names),
        "target_names": list(dataset.target_names),
        "log_evidence_init": info["log_evidence_init"],
        "log_evidence": info["log_evidence"],
        "complexity": complexity_report(model),
        "leaves": leaf_table(model),
        "violations": [list(v) for v in validate(model)],
    }


def dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def header_line(cfg_fingerprint: str, extra: str = "") -> str:
    s = f"# spngp {__version__} config={cfg_fingerprint}"
    return s + (f" {extra}" if extra else "")


# --------------------------------------------------------------------------
# full GP baseline


def _se_init(X, y, D) -> KernelSpec:
    sd = float(np.std(y)) or 1.0
    width = X.max(axis=0) - X.min(axis=0)
    width = np.where(width > 0, width, 1.0)
    return KernelSpec.create("se_ard", D, sigma_f=sd, lengthscale=width / 2.0)


def fit_gp_hyper(X, y, seed: int, max_iters: int = 100, kernel: str = "se_ard") -> GpLeaf:
    """Exact GP on ``(X, y)`` with optimized hyperparameters (``y`` already centred)."""
    D = X.shape[1]
    sd = float(np.std(y)) or 1.0
    if kernel == "se_ard":
        spec = _se_init(X, y, D)
    else:
        width = X.max(axis=0) - X.min(axis=0)
        width = np.where(width > 0, width, 1.0)
        spec = KernelSpec.create(kernel, D, sigma_f=sd, lengthscale=width / 2.0)
    leaf = GpLeaf(spec, math.log(0.1 * sd), X, y, tag="full_gp")
    optimize_leaf(leaf, OptimizerConfig(max_iters=max_iters, seed=seed))
    return leaf


def fit_full_gp(train: Dataset, Xtest, cfg: ExperimentConfig) -> np.ndarray:
    """Mean prediction of one exact GP per output on all training rows."""
    preds = []
    for j in range(train.Y.shape[1]):
        mu = train.Y[:, j].mean()
        y = train.Y[:, j] - mu
        if cfg.full_gp.optimize:
            leaf = fit_gp_hyper(train.X, y, cfg.seed, cfg.full_gp.max_iters, cfg.full_gp.kernel)
        else:
            leaf = GpLeaf(_se_init(train.X, y, train.X.shape[1]), math.log(0.1 * (float(np.std(y)) or 1.0)),
                          train.X, y).fit()
        preds.append(leaf.predict(Xtest).mean + mu)
    return np.column_stack(preds)


# --------------------------------------------------------------------------
# expert-size sweep


def sweep(dataset: Dataset, cfg: ExperimentConfig, jobs: int = 1) -> tuple[list[dict], dict]:
    """RMSE against points per expert for every ``min_points`` value in the config.

    In ``full_gp`` mode the SE-ARD hyperparameters are fitted once on a
    random training subset and then held fixed, so that the curve isolates
    the effect of the partition.  The final row is the single-expert GP.
    """
    sc = cfg.sweep
    if dataset.Y.shape[1] != 1:
        raise ConfigError("sweep supports a single target column")
    train, test = split(dataset, sc.train_fraction, cfg.seed)
    timing = {}
    t0 = time.perf_counter()
    structure = cfg.structure_for(cfg.seed, None)
    if sc.hyperparameters == "full_gp":
        rng = np.random.default_rng([cfg.seed, 2])
        m = min(sc.hyper_subset, train.n)
        sub = np.sort(rng.choice(train.n, m, replace=False))
        y = train.Y[sub, 0] - train.Y[:, 0].mean()
        leaf = fit_gp_hyper(train.X[sub], y, cfg.seed, cfg.full_gp.max_iters)
        p = leaf.kernel.params
        tpl = KernelTemplate("se_ard", sigma_f=float(p[0]), lengthscale=p[1:].tolist())
        structure = dataclasses.replace(structure, kernel_menu=[tpl], noise=math.exp(leaf.log_noise))
        optimize = False
    else:
        optimize = None
    timing["hyperparameters"] = time.perf_counter() - t0

    rows = []
    values = list(sc.min_points) + [max(train.n, max(sc.min_points))]
    for k, O in enumerate(values):
        t0 = time.perf_counter()
        s = dataclasses.replace(structure, min_points=int(O))
        model, _ = train_model(train, cfg, overlap="none", jobs=jobs, optimize=optimize, structure=s)
        pred = model.predict(test.X)[0].mean
        _, err = rmse(pred[:, None], test.Y)
        rep = complexity_report(model)
        sizes = [n for n in rep["leaf_sizes"] if n > 0]
        rows.append({
            "label": "full_gp" if k == len(values) - 1 else "spn_gp",
            "min_points": int(O),
            "n_experts": len(sizes),
            "avg_points_per_expert": float(np.mean(sizes)),
            "rmse": err,
        })
        timing[f"O={O}"] = time.perf_counter() - t0
    full = rows[-1]["rmse"]
    for r in rows:
        r["rmse_ratio"] = r["rmse"] / full
    return rows, timing


def sweep_csv(rows: list[dict], cfg_fingerprint: str) -> str:
    buf = io.StringIO()
    buf.write(header_line(cfg_fingerprint) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    keys = ["label", "min_points", "n_experts", "avg_points_per_expert", "rmse", "rmse_ratio"]
    w.writerow(keys)
    for r in rows:
        w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in keys])
    return buf.getvalue()


# --------------------------------------------------------------------------
# predictions


def prediction_csv(model: SpnGp, X, feature_names, target_names, header: str) -> str:
    """Plot-ready dump: inputs, then per output mean, variances, 95% band and MAP leaf/region."""
    X = np.asarray(X, dtype=float).reshape(-1, model.input_dim)
    buf = io.StringIO()
    buf.write(header + "\n")
    w = csv.writer(buf, lineterminator="\n")
    cols = list(feature_names)
    for t in target_names:
        cols += [f"{t}_mean", f"{t}_var_f", f"{t}_var_y", f"{t}_lo", f"{t}_hi", f"{t}_map_leaf",
                 f"{t}_map_region"]
    w.writerow(cols)
    if X.shape[0] == 0:
        return buf.getvalue()
    moments = model.predict(X)
    leaves = map_leaves(model, X)
    region_of = {nid: model.nodes[nid].region.id for nid in np.unique(leaves).tolist() if nid >= 0}
    for i in range(X.shape[0]):
        row = [repr(float(v)) for v in X[i]]
        for j, pm in enumerate(moments):
            half = BAND_Z * math.sqrt(max(float(pm.var_y[i]), 0.0))
            m = float(pm.mean[i])
            lid = int(leaves[i, j])
            row += [repr(m), repr(float(pm.var_f[i])), repr(float(pm.var_y[i])), repr(m - half),
                    repr(m + half), lid, region_of.get(lid, -1)]
        w.writerow(row)
    return buf.getvalue()
