"""Marginal-likelihood maximization for GP leaf hyperparameters.

Two modes:

* ``independent``: every leaf ascends its own log evidence.
* ``tied_per_kernel_family``: all leaves sharing a kernel family share one
  parameter vector, ascended on the log evidence of the whole network.  The
  gradient mixes leaf gradients weighted by each leaf's posterior
  probability of appearing in the induced tree.

The optimizer is gradient ascent in log-parameter space with Armijo
backtracking; each iteration's trial step comes from the Barzilai-Borwein
rule (or geometric growth when the curvature estimate is unusable).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .gp import GpLeaf, NumericalError, StateError, evidence_and_grad
from .spn import SpnGp, node_flows, node_log_evidences

log = logging.getLogger(__name__)

LOG_PARAM_BOUND = 25.0
MAX_STEP = 1e3


@dataclass
class OptimizerConfig:
    max_iters: int = 200
    grad_tol: float = 1e-4
    init_step: float = 0.05
    backtrack: float = 0.5
    growth: float = 2.0
    min_step: float = 1e-10
    armijo: float = 1e-4
    max_move: float = 1.0
    restarts: int = 0
    restart_scale: float = 0.5
    tie_mode: str = "independent"
    fix_noise: bool = False
    noise_floor: float = 1e-4
    seed: int = 0
    verbose: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if min(self.grad_tol, self.init_step, self.min_step, self.max_move) <= 0 or not 0 < self.backtrack < 1:
            raise ValueError("step control parameters must be positive, backtrack in (0, 1)")
        if self.restarts < 0:
            raise ValueError("restarts must be >= 0")
        if self.tie_mode not in ("independent", "tied_per_kernel_family"):
            raise ValueError(f"unknown tie_mode {self.tie_mode!r}")


@dataclass
class TraceRow:
    iteration: int
    objective: float
    grad_norm: float
    step: float


@dataclass
class AscentResult:
    theta: np.ndarray
    objective: float
    grad: np.ndarray
    trace: list[TraceRow] = field(default_factory=list)
    reason: str = ""


def _safe(fn, theta):
    try:
        f, g = fn(theta)
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError):
        return -np.inf, None
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        return -np.inf, None
    return f, g


def gradient_ascent(
    fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    theta0,
    cfg: OptimizerConfig,
    free: np.ndarray | None = None,
    project: Callable[[np.ndarray], np.ndarray] | None = None,
) -> AscentResult:
    """Maximize ``fn`` (returning value and gradient) from ``theta0``.

    ``free`` masks which coordinates move; ``project`` maps a trial point
    back into the feasible set.  Accepted steps never decrease the objective.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    free = np.ones(theta.size, dtype=bool) if free is None else np.asarray(free, dtype=bool)
    project = project or (lambda t: t)
    theta = project(theta)
    f, g = _safe(fn, theta)
    if g is None:
        raise NumericalError(f"non-finite objective at the starting point {theta}")
    g = np.where(free, g, 0.0)
    step = cfg.init_step
    trace = [TraceRow(0, f, float(np.linalg.norm(g)), 0.0)]
    reason = "max_iters"
    for it in range(1, cfg.max_iters + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= cfg.grad_tol * (1.0 + abs(f)):
            reason = "grad_tol"
            break
        accepted = False
        while step >= cfg.min_step:
            move = step * g
            norm = float(np.linalg.norm(move))
            if norm > cfg.max_move:  # trust region in log space
                move *= cfg.max_move / norm
            trial = np.clip(project(theta + move), -LOG_PARAM_BOUND, LOG_PARAM_BOUND)
            ft, gt = _safe(fn, trial)
            if gt is not None and ft >= f + cfg.armijo * float(g @ (trial - theta)):
                accepted = True
                break
            step *= cfg.backtrack
        if not accepted:
            reason = "min_step"
            break
        gt = np.where(free, gt, 0.0)
        s_k, y_k = trial - theta, gt - g
        theta, f, g = trial, ft, gt
        trace.append(TraceRow(it, f, float(np.linalg.norm(g)), step))
        if cfg.verbose:
            log.info("%d\t%.10g\t%.6g\t%.3g", it, f, trace[-1].grad_norm, step)
        # Barzilai-Borwein trial step for the next iteration; backtracking still applies
        curv = -float(s_k @ y_k)
        step = float(s_k @ s_k) / curv if curv > 0 else step * cfg.growth
        step = min(max(step, cfg.min_step), MAX_STEP)
    return AscentResult(theta, f, g, trace, reason)


def _restart_starts(theta0, cfg: OptimizerConfig, rng):
    starts = [np.asarray(theta0, dtype=float)]
    for _ in range(cfg.restarts):
        starts.append(starts[0] + cfg.restart_scale * rng.standard_normal(starts[0].size))
    return starts


def _best(fn, starts, cfg, free, project):
    best, err = None, None
    for s in starts:
        try:
            res = gradient_ascent(fn, s, cfg, free, project)
        except NumericalError as e:
            err = e
            continue
        if best is None or res.objective > best.objective:
            best = res
    if best is None:
        raise err
    return best


def leaf_objective(leaf: GpLeaf):
    """Objective/gradient closure over a leaf's own (non-overlap) rows."""
    n = leaf.n_own
    X, y, kernel, tag = leaf.X[:n], leaf.y[:n], leaf.kernel, leaf.tag

    def fn(theta):
        return evidence_and_grad(kernel.with_log_params(theta[:-1]), theta[-1], X, y, tag)

    return fn


def _noise_projector(n_params: int, floor: float | None):
    if floor is None or floor <= 0:
        return None
    lo = math.log(floor)

    def project(theta):
        theta = theta.copy()
        theta[n_params - 1] = max(theta[n_params - 1], lo)
        return theta

    return project


def optimize_leaf(leaf: GpLeaf, cfg: OptimizerConfig, noise_floor: float | None = None,
                  rng=None) -> GpLeaf:
    """Maximize a leaf's log evidence in place; leaves with < 2 own rows are untouched."""
    if leaf.n_own < 2:
        return leaf
    if noise_floor is None:
        sd = float(np.std(leaf.y[: leaf.n_own]))
        noise_floor = cfg.noise_floor * (sd if sd > 0 else 1.0)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    theta0 = leaf.log_params
    free = np.ones(theta0.size, dtype=bool)
    if cfg.fix_noise:
        free[-1] = False
    fn = leaf_objective(leaf)
    project = None if cfg.fix_noise else _noise_projector(theta0.size, noise_floor)
    starts = _restart_starts(theta0, cfg, rng)
    if cfg.fix_noise:
        for s in starts:
            s[-1] = theta0[-1]
    res = _best(fn, starts, cfg, free, project)
    leaf.set_log_params(res.theta)
    leaf.fit()
    leaf.opt_trace = res.trace
    return leaf


def _family_key(leaf: GpLeaf) -> tuple:
    return (leaf.kernel.family, leaf.kernel.nu)


def tied_groups(model: SpnGp) -> dict[tuple, list]:
    groups: dict[tuple, list] = {}
    for leaf in model.leaves():
        groups.setdefault(_family_key(leaf.gp), []).append(leaf)
    return groups


def tied_objective(model: SpnGp, groups: dict[tuple, list]):
    """Objective/gradient closure over the concatenated per-family parameter vectors."""
    keys = list(groups)
    sizes = [groups[k][0].gp.log_params.size for k in keys]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def fn(theta):
        for k, a, b in zip(keys, offsets[:-1], offsets[1:]):
            for leaf in groups[k]:
                leaf.gp.set_log_params(theta[a:b])
                leaf.gp.fit()
        Z = node_log_evidences(model)
        flow = node_flows(model, Z)
        grad = np.zeros_like(theta)
        for k, a, b in zip(keys, offsets[:-1], offsets[1:]):
            for leaf in groups[k]:
                if flow[leaf.id] > 0 and leaf.gp.n_own > 0:
                    grad[a:b] += flow[leaf.id] * leaf.gp.log_marginal_likelihood_grad()
        return Z[model.root], grad

    return fn, keys, offsets


def optimize_model(model: SpnGp, cfg: OptimizerConfig, jobs: int = 1) -> SpnGp:
    """Optimize every leaf (independent) or every kernel family (tied), then refit."""
    if model.posterior_applied:
        raise StateError("hyperparameters must be optimized before posterior_update")
    leaves = model.leaves()
    if cfg.tie_mode == "independent":
        def run(i_leaf):
            i, leaf = i_leaf
            floor = cfg.noise_floor * float(model.y_std[leaf.output])
            try:
                optimize_leaf(leaf.gp, cfg, floor, np.random.default_rng([cfg.seed, i]))
            except NumericalError as e:
                raise NumericalError(f"leaf {leaf.id} (region {leaf.region.id}): {e}") from e

        if jobs > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(jobs) as ex:
                list(ex.map(run, enumerate(leaves)))
        else:
            for item in enumerate(leaves):
                run(item)
        model.fit_leaves(jobs)
        return model

    groups = tied_groups(model)
    fn, keys, offsets = tied_objective(model, groups)
    theta0 = np.concatenate([np.mean([l.gp.log_params for l in groups[k]], axis=0) for k in keys])
    free = np.ones(theta0.size, dtype=bool)
    noise_slots = offsets[1:] - 1
    if cfg.fix_noise:
        free[noise_slots] = False
    floor = math.log(cfg.noise_floor * float(np.min(model.y_std)))

    def project(theta):
        if cfg.fix_noise:
            return theta
        theta = theta.copy()
        theta[noise_slots] = np.maximum(theta[noise_slots], floor)
        return theta

    rng = np.random.default_rng(cfg.seed)
    starts = _restart_starts(theta0, cfg, rng)
    if cfg.fix_noise:
        for s in starts:
            s[noise_slots] = theta0[noise_slots]
    res = _best(fn, starts, cfg, free, project)
    fn(res.theta)
    model.opt_trace = res.trace
    return model
