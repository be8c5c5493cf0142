"""Sum-product networks whose leaves are GP experts.

Node kinds:

* ``SumNode``     mixture over children that share output scope and region
* ``ProductNode`` factorization over disjoint output scopes (same region)
* ``SplitNode``   factorization over input space: children tile the parent
                  region along one axis at ascending thresholds
* ``LeafNode``    a :class:`~spngp.gp.GpLeaf` over one output variable

All weights and evidences live in the log domain.  Every inference routine
is a single pass over a cached topological order; the induced-tree
enumeration at the bottom of this module is the brute-force reference used
by the tests.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from .gp import GpLeaf, PredictiveMoments, StateError

SUM_NORMALIZATION_TOL = 1e-12
DEFAULT_TREE_CAP = 100_000


class DomainError(ValueError):
    """Query point outside the model's root region in strict mode."""


class CapacityError(RuntimeError):
    """Induced-tree enumeration would exceed the configured cap."""


@dataclass(eq=False)
class Region:
    """Axis-aligned half-open box ``lower <= x < upper`` plus the rows inside it."""

    lower: np.ndarray
    upper: np.ndarray
    data_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    overlap_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    id: int = 0

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        self.data_idx = np.asarray(self.data_idx, dtype=np.int64)
        self.overlap_idx = np.asarray(self.overlap_idx, dtype=np.int64)

    @property
    def key(self) -> tuple:
        return tuple(self.lower.tolist()) + tuple(self.upper.tolist())

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def same_box(self, other: "Region") -> bool:
        return np.array_equal(self.lower, other.lower) and np.array_equal(self.upper, other.upper)

    def contains(self, X, closed_upper=None) -> np.ndarray:
        """Row-wise membership.  ``closed_upper`` marks axes whose upper edge is closed."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        below = X < self.upper
        if closed_upper is not None:
            below |= closed_upper & (X == self.upper)
        return np.all((X >= self.lower) & below, axis=1)


@dataclass(eq=False)
class Node:
    id: int
    out_scope: frozenset
    region: Region

    @property
    def children(self) -> list[int]:
        return []


@dataclass(eq=False)
class SumNode(Node):
    child_ids: list[int] = field(default_factory=list)
    log_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def children(self):
        return self.child_ids

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)


@dataclass(eq=False)
class ProductNode(Node):
    child_ids: list[int] = field(default_factory=list)

    @property
    def children(self):
        return self.child_ids


@dataclass(eq=False)
class SplitNode(Node):
    axis: int = 0
    thresholds: np.ndarray = field(default_factory=lambda: np.zeros(0))
    child_ids: list[int] = field(default_factory=list)

    @property
    def children(self):
        return self.child_ids

    def route(self, X) -> np.ndarray:
        """Index of the child owning each row of X (half-open intervals)."""
        return np.searchsorted(self.thresholds, np.asarray(X)[:, self.axis], side="right")


@dataclass(eq=False)
class LeafNode(Node):
    gp: GpLeaf = None

    @property
    def output(self) -> int:
        (j,) = self.out_scope
        return j


class Violation(NamedTuple):
    node_id: int
    rule: str
    detail: str = ""


@dataclass
class SpnGp:
    """A rooted DAG of SPN nodes plus the training metadata needed to rebuild leaves."""

    nodes: dict
    root: int
    input_dim: int
    output_dim: int = 1
    y_offset: np.ndarray = None
    y_std: np.ndarray = None
    fingerprint: str = ""
    X_train: np.ndarray = None
    Y_train: np.ndarray = None
    posterior_applied: bool = False
    _order: list = field(default=None, repr=False)

    def __post_init__(self):
        if self.y_offset is None:
            self.y_offset = np.zeros(self.output_dim)
        if self.y_std is None:
            self.y_std = np.ones(self.output_dim)
        self.y_offset = np.asarray(self.y_offset, dtype=float).reshape(self.output_dim)
        self.y_std = np.asarray(self.y_std, dtype=float).reshape(self.output_dim)

    @property
    def root_node(self) -> Node:
        return self.nodes[self.root]

    def topological_order(self) -> list[int]:
        """Node ids with every child before its parents (post-order from the root)."""
        if self._order is None:
            order, state = [], {}
            stack = [(self.root, False)]
            while stack:
                nid, expanded = stack.pop()
                if expanded:
                    state[nid] = 2
                    order.append(nid)
                    continue
                if state.get(nid):
                    if state[nid] == 1:
                        raise ValueError(f"cycle through node {nid}")
                    continue
                state[nid] = 1
                stack.append((nid, True))
                for c in reversed(self.nodes[nid].children):
                    if state.get(c) == 1:
                        raise ValueError(f"cycle through node {c}")
                    if not state.get(c):
                        stack.append((c, False))
            self._order = order
        return self._order

    def invalidate_order(self):
        self._order = None

    def leaves(self) -> list[LeafNode]:
        return [self.nodes[n] for n in self.topological_order() if isinstance(self.nodes[n], LeafNode)]

    def sums(self) -> list[SumNode]:
        return [self.nodes[n] for n in self.topological_order() if isinstance(self.nodes[n], SumNode)]

    def fit_leaves(self, jobs: int = 1, refit: bool = False):
        todo = [l.gp for l in self.leaves() if refit or not l.gp.fitted]
        if jobs > 1 and len(todo) > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(jobs) as ex:
                list(ex.map(GpLeaf.fit, todo))
        else:
            for gp in todo:
                gp.fit()
        return self

    def closed_upper(self) -> np.ndarray:
        return np.ones(self.input_dim, dtype=bool)

    # thin method wrappers for the module-level operations
    def validate(self):
        return validate(self)

    def log_evidence(self):
        return log_evidence(self)

    def posterior_update(self):
        return posterior_update(self)

    def predict(self, Xstar, strict=False):
        return predict(self, Xstar, strict=strict)


# --------------------------------------------------------------------------
# validation


def _closed_mask(region: Region, root: Region) -> np.ndarray:
    return region.upper == root.upper


def validate(model: SpnGp) -> list[Violation]:
    out: list[Violation] = []
    nodes = model.nodes
    if model.root not in nodes:
        return [Violation(model.root, "missing-root")]
    for nid, node in nodes.items():
        for c in node.children:
            if c not in nodes:
                out.append(Violation(nid, "missing-child", f"child {c}"))
    if out:
        return out
    try:
        model.invalidate_order()
        reach = set(model.topological_order())
    except ValueError as e:
        return [Violation(model.root, "cycle", str(e))]
    for nid in sorted(set(nodes) - reach):
        out.append(Violation(nid, "unreachable"))

    root_region = nodes[model.root].region
    for nid in sorted(reach):
        node = nodes[nid]
        reg = node.region
        if np.any(reg.lower > reg.upper):
            out.append(Violation(nid, "region-bounds"))
        if np.intersect1d(reg.data_idx, reg.overlap_idx).size:
            out.append(Violation(nid, "region-overlap-indices"))
        kids = [nodes[c] for c in node.children]

        if isinstance(node, SumNode):
            lw = np.asarray(node.log_weights, dtype=float)
            if not kids or len(kids) != lw.size:
                out.append(Violation(nid, "sum-arity"))
            elif not np.all(np.isfinite(lw)):
                out.append(Violation(nid, "sum-weights-finite"))
            elif abs(logsumexp(lw)) > SUM_NORMALIZATION_TOL:
                out.append(Violation(nid, "sum-normalized", f"logsumexp={logsumexp(lw):.3e}"))
            if any(k.out_scope != node.out_scope or not k.region.same_box(reg) for k in kids):
                out.append(Violation(nid, "sum-completeness"))

        elif isinstance(node, ProductNode):
            scopes = [k.out_scope for k in kids]
            total = sum(len(s) for s in scopes)
            union = frozenset().union(*scopes) if scopes else frozenset()
            if not kids or total != len(union) or union != node.out_scope:
                out.append(Violation(nid, "product-decomposability"))
            if any(not k.region.same_box(reg) for k in kids):
                out.append(Violation(nid, "product-region"))

        elif isinstance(node, SplitNode):
            out.extend(_validate_split(nid, node, kids))

        elif isinstance(node, LeafNode):
            gp = node.gp
            if gp is None or len(node.out_scope) != 1:
                out.append(Violation(nid, "leaf-payload"))
            elif gp.kernel.input_dim != model.input_dim:
                out.append(Violation(nid, "leaf-dimension"))
            if model.X_train is not None and reg.data_idx.size:
                inside = reg.contains(model.X_train[reg.data_idx], _closed_mask(reg, root_region))
                if not inside.all():
                    out.append(Violation(nid, "leaf-rows-outside-region"))
        else:
            out.append(Violation(nid, "unknown-kind"))
    return out


def _validate_split(nid, node: SplitNode, kids) -> list[Violation]:
    reg, d = node.region, node.axis
    t = np.asarray(node.thresholds, dtype=float)
    if not 0 <= d < reg.lower.size:
        return [Violation(nid, "split-axis")]
    if len(kids) != t.size + 1 or not kids:
        return [Violation(nid, "split-arity")]
    out = []
    if any(k.out_scope != node.out_scope for k in kids):
        out.append(Violation(nid, "split-scope"))
    others = np.arange(reg.lower.size) != d
    if any(
        not (np.array_equal(k.region.lower[others], reg.lower[others])
             and np.array_equal(k.region.upper[others], reg.upper[others]))
        for k in kids
    ):
        out.append(Violation(nid, "split-cover", "children differ off the split axis"))
    lo = np.array([k.region.lower[d] for k in kids])
    hi = np.array([k.region.upper[d] for k in kids])
    if np.any(hi[:-1] > lo[1:]) or np.any(np.diff(t) <= 0):
        out.append(Violation(nid, "split-disjointness"))
    elif (lo[0] != reg.lower[d] or hi[-1] != reg.upper[d] or np.any(hi[:-1] != lo[1:])
          or not np.array_equal(hi[:-1], t)):
        out.append(Violation(nid, "split-cover", "children do not tile the parent at thresholds"))
    return out


# --------------------------------------------------------------------------
# evidence and posterior


def node_log_evidences(model: SpnGp) -> dict[int, float]:
    """Bottom-up log evidence of every node."""
    Z: dict[int, float] = {}
    for nid in model.topological_order():
        node = model.nodes[nid]
        if isinstance(node, LeafNode):
            if not node.gp.fitted:
                raise StateError(f"leaf {nid} is not fitted")
            Z[nid] = node.gp.log_evidence
        elif isinstance(node, SumNode):
            Z[nid] = float(logsumexp(node.log_weights + np.array([Z[c] for c in node.child_ids])))
        else:
            Z[nid] = float(sum(Z[c] for c in node.children))
    return Z


def log_evidence(model: SpnGp) -> float:
    return node_log_evidences(model)[model.root]


def posterior_update(model: SpnGp) -> SpnGp:
    """Reweight every sum node by its children's evidence; refuses to run twice."""
    if model.posterior_applied:
        raise StateError("posterior already applied to this model")
    Z = node_log_evidences(model)
    for s in model.sums():
        a = s.log_weights + np.array([Z[c] for c in s.child_ids])
        s.log_weights = a - logsumexp(a)
    model.posterior_applied = True
    return model


def node_flows(model: SpnGp, Z: dict[int, float] | None = None) -> dict[int, float]:
    """d log Z_root / d log Z_node: posterior probability that a node is in the induced tree."""
    if Z is None:
        Z = node_log_evidences(model)
    flow = dict.fromkeys(model.nodes, 0.0)
    flow[model.root] = 1.0
    for nid in reversed(model.topological_order()):
        node, f = model.nodes[nid], flow[nid]
        if f == 0.0:
            continue
        if isinstance(node, SumNode):
            zc = np.array([Z[c] for c in node.child_ids])
            r = np.exp(node.log_weights + zc - Z[nid])
            for c, rc in zip(node.child_ids, r):
                flow[c] += f * rc
        else:
            for c in node.children:
                flow[c] += f
    return flow


# --------------------------------------------------------------------------
# prediction


def _check_queries(model: SpnGp, Xstar, strict: bool) -> np.ndarray:
    X = np.asarray(Xstar, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, model.input_dim) if model.input_dim > 1 else X[:, None]
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ValueError(f"queries have shape {X.shape}, model expects {model.input_dim} columns")
    if not np.all(np.isfinite(X)):
        raise ValueError("queries contain non-finite values")
    if strict:
        root = model.root_node.region
        bad = ~root.contains(X, model.closed_upper())
        if bad.any():
            raise DomainError(f"{int(bad.sum())} query points outside the root region")
    return X


def _reach_masks(model: SpnGp, X: np.ndarray) -> dict[int, np.ndarray]:
    M = X.shape[0]
    masks = {model.root: np.ones(M, dtype=bool)}
    for nid in reversed(model.topological_order()):
        node, m = model.nodes[nid], masks.get(nid)
        if m is None:
            continue
        if isinstance(node, SplitNode):
            # thresholds route out-of-box points to the outermost children, i.e. clamping
            idx = node.route(X)
            for i, c in enumerate(node.child_ids):
                sel = m & (idx == i)
                masks[c] = masks[c] | sel if c in masks else sel
        else:
            for c in node.children:
                masks[c] = masks[c] | m if c in masks else m.copy()
    return masks


def predict(model: SpnGp, Xstar, strict: bool = False, chunk: int = 4096) -> list[PredictiveMoments]:
    """Predictive moments of every output variable at the query rows.

    Returns one :class:`PredictiveMoments` per output (index order).  Means
    include the training-target offset; ``var_f`` is the latent variance and
    ``var_y`` adds each responsible leaf's noise variance.
    """
    if not model.posterior_applied:
        raise StateError("posterior_update must be applied before predict")
    X = _check_queries(model, Xstar, strict)
    if X.shape[0] > chunk:
        parts = [predict(model, X[i:i + chunk], strict, chunk) for i in range(0, X.shape[0], chunk)]
        return [
            PredictiveMoments(*(np.concatenate([p[j].__dict__[k] for p in parts])
                                for k in ("mean", "var_f", "var_y")))
            for j in range(model.output_dim)
        ]
    M = X.shape[0]
    masks = _reach_masks(model, X)
    vals: dict[int, dict[int, tuple]] = {}
    for nid in model.topological_order():
        node = model.nodes[nid]
        m = masks.get(nid)
        if m is None:
            continue
        idx = np.flatnonzero(m)
        if isinstance(node, LeafNode):
            mean = np.full(M, np.nan)
            vf = np.full(M, np.nan)
            vy = np.full(M, np.nan)
            if idx.size:
                pm = node.gp.predict(X[idx])
                mean[idx], vf[idx], vy[idx] = pm.mean, pm.var_f, pm.var_y
            vals[nid] = {node.output: (mean, vf, vy)}
        elif isinstance(node, SumNode):
            w = np.exp(node.log_weights)
            res = {}
            for j in node.out_scope:
                cm = np.stack([vals[c][j][0][idx] for c in node.child_ids])
                cf = np.stack([vals[c][j][1][idx] for c in node.child_ids])
                cy = np.stack([vals[c][j][2][idx] for c in node.child_ids])
                mu = w @ cm
                dev = (cm - mu) ** 2
                mean, vf, vy = np.full(M, np.nan), np.full(M, np.nan), np.full(M, np.nan)
                mean[idx] = mu
                vf[idx] = w @ (cf + dev)
                vy[idx] = w @ (cy + dev)
                res[j] = (mean, vf, vy)
            vals[nid] = res
        elif isinstance(node, ProductNode):
            res = {}
            for c in node.child_ids:
                res.update(vals[c])
            vals[nid] = res
        else:
            route = node.route(X)
            res = {}
            for j in node.out_scope:
                mean, vf, vy = np.full(M, np.nan), np.full(M, np.nan), np.full(M, np.nan)
                for i, c in enumerate(node.child_ids):
                    sel = m & (route == i)
                    cm, cf, cy = vals[c][j]
                    mean[sel], vf[sel], vy[sel] = cm[sel], cf[sel], cy[sel]
                res[j] = (mean, vf, vy)
            vals[nid] = res
    root = vals[model.root]
    return [
        PredictiveMoments(root[j][0] + model.y_offset[j], root[j][1], root[j][2])
        for j in range(model.output_dim)
    ]


def map_tree_choice(model: SpnGp) -> dict[int, int]:
    """Chosen child of each sum node in the maximum-weight induced tree (max-product pass)."""
    best: dict[int, float] = {}
    choice: dict[int, int] = {}
    for nid in model.topological_order():
        node = model.nodes[nid]
        if isinstance(node, LeafNode):
            best[nid] = 0.0
        elif isinstance(node, SumNode):
            s = node.log_weights + np.array([best[c] for c in node.child_ids])
            k = int(np.argmax(s))
            choice[nid] = node.child_ids[k]
            best[nid] = float(s[k])
        else:
            best[nid] = sum(best[c] for c in node.children)
    return choice


def map_leaves(model: SpnGp, Xstar) -> np.ndarray:
    """Leaf id per (query, output) inside the maximum-weight induced tree."""
    X = _check_queries(model, Xstar, strict=False)
    choice = map_tree_choice(model)
    out = np.full((X.shape[0], model.output_dim), -1, dtype=np.int64)

    def descend(nid, rows):
        node = model.nodes[nid]
        if rows.size == 0:
            return
        if isinstance(node, LeafNode):
            out[rows, node.output] = nid
        elif isinstance(node, SumNode):
            descend(choice[nid], rows)
        elif isinstance(node, SplitNode):
            r = node.route(X[rows])
            for i, c in enumerate(node.child_ids):
                descend(c, rows[r == i])
        else:
            for c in node.child_ids:
                descend(c, rows)

    descend(model.root, np.arange(X.shape[0]))
    return out


# --------------------------------------------------------------------------
# induced-tree enumeration (brute-force reference)


@dataclass(frozen=True)
class InducedTree:
    edges: tuple
    leaves: tuple
    log_prior: float


def count_induced_trees(model: SpnGp) -> int:
    count: dict[int, int] = {}
    for nid in model.topological_order():
        node = model.nodes[nid]
        if isinstance(node, LeafNode):
            count[nid] = 1
        elif isinstance(node, SumNode):
            count[nid] = sum(count[c] for c in node.child_ids)
        else:
            n = 1
            for c in node.children:
                n *= count[c]
            count[nid] = n
    return count[model.root]


def enumerate_induced_trees(model: SpnGp, cap: int = DEFAULT_TREE_CAP) -> list[InducedTree]:
    n = count_induced_trees(model)
    if n > cap:
        raise CapacityError(f"model has {n} induced trees, cap is {cap}")

    memo: dict[int, list] = {}

    def trees(nid):
        if nid in memo:
            return memo[nid]
        node = model.nodes[nid]
        if isinstance(node, LeafNode):
            res = [((), (nid,), 0.0)]
        elif isinstance(node, SumNode):
            res = []
            for c, lw in zip(node.child_ids, node.log_weights):
                for edges, leaves, lp in trees(c):
                    res.append((((nid, c),) + edges, leaves, lp + float(lw)))
        else:
            res = []
            for combo in itertools.product(*(trees(c) for c in node.children)):
                res.append((
                    tuple(e for t in combo for e in t[0]),
                    tuple(l for t in combo for l in t[1]),
                    sum(t[2] for t in combo),
                ))
        memo[nid] = res
        return res

    return [InducedTree(e, l, lp) for e, l, lp in trees(model.root)]


def route(model: SpnGp, x, trees: list[InducedTree] | None = None) -> list[tuple[int, ...]]:
    """For each induced tree, the leaves (one per output) whose region contains ``x``.

    Membership is decided from region boxes, independently of split thresholds.
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    root = model.root_node.region
    if not root.contains(x, model.closed_upper())[0]:
        raise DomainError("query outside the root region")
    if trees is None:
        trees = enumerate_induced_trees(model)
    inside = {l.id for l in model.leaves() if l.region.contains(x, _closed_mask(l.region, root))[0]}
    return [tuple(l for l in t.leaves if l in inside) for t in trees]
