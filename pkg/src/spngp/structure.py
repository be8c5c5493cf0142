"""Structure learning: random axis-aligned region graphs and their SPN-GP instantiation.

The region graph is built breadth-first.  A region holding more than
``min_points`` rows is partitioned along a randomly drawn axis, either into
``children_per_split`` equal-width slabs or into slabs of width
``min_width[d]``.  Sub-regions with identical boxes are merged, so with more
than one partition per region the graph is a DAG.

``build_spn`` then equips leaf regions with one GP per kernel template under
a sum node, internal regions with sum nodes, and partitions with split nodes
formed from the cross-product of their sub-regions' sum nodes.
"""

from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .gp import GpLeaf
from .kernels import LINEAR, MATERN, PERIODIC, KernelSpec, canonical_family
from .spn import LeafNode, ProductNode, Region, SpnGp, SplitNode, SumNode

RESOLUTION_FRACTION = 1e-9


@dataclass
class KernelTemplate:
    """A menu entry: kernel family plus optional fixed natural-scale hyperparameters.

    Unset values are filled per region with scale-aware defaults.
    """

    family: str
    nu: float = 1.5
    sigma_f: float | None = None
    lengthscale: float | list | None = None
    period: float | None = None

    def __post_init__(self):
        self.family = canonical_family(self.family)


@dataclass
class StructureConfig:
    min_points: int = 500
    children_per_split: int = 2
    min_width: float | list | None = None
    sum_nodes_per_region: int = 1
    partitions_per_region: int = 1
    kernel_menu: list = field(default_factory=lambda: [KernelTemplate("se_ard")])
    noise: float | None = None
    overlap: str = "none"
    overlap_count: int = 3
    overlap_radius: float = 0.0
    bounds: tuple | None = None
    max_split_nodes: int = 16
    rng_seed: int = 0

    def __post_init__(self):
        self.kernel_menu = [k if isinstance(k, KernelTemplate) else KernelTemplate(**k)
                            for k in self.kernel_menu]
        if self.min_points < 1:
            raise ValueError("min_points must be >= 1")
        if self.min_width is None and self.children_per_split < 2:
            raise ValueError("children_per_split must be >= 2")
        if self.sum_nodes_per_region < 1 or self.partitions_per_region < 1:
            raise ValueError("sum_nodes_per_region and partitions_per_region must be >= 1")
        if not self.kernel_menu:
            raise ValueError("kernel_menu must not be empty")
        if self.overlap not in ("none", "count", "radius"):
            raise ValueError(f"unknown overlap mode {self.overlap!r}")

    @property
    def equal_width(self) -> bool:
        return self.min_width is None


@dataclass
class Partition:
    id: int
    parent: int
    axis: int
    thresholds: np.ndarray
    children: list[int]


@dataclass
class RegionGraph:
    regions: list[Region]
    partitions: list[Partition]
    region_partitions: dict[int, list[int]]
    indivisible: set[int]
    n_rows: int

    @property
    def root(self) -> Region:
        return self.regions[0]

    def is_leaf(self, rid: int) -> bool:
        return not self.region_partitions.get(rid)

    def leaf_regions(self) -> list[Region]:
        return [r for r in self.regions if self.is_leaf(r.id)]


def _thresholds(lo: float, hi: float, cfg: StructureConfig, delta: float) -> np.ndarray:
    if cfg.equal_width:
        V = cfg.children_per_split
        return lo + (hi - lo) * np.arange(1, V) / V
    n = math.ceil((hi - lo) / delta)
    t = lo + delta * np.arange(1, n)
    return t[t < hi]


def _min_width(cfg: StructureConfig, D: int) -> np.ndarray:
    if cfg.equal_width:
        return np.zeros(D)
    return np.broadcast_to(np.asarray(cfg.min_width, dtype=float), (D,)).copy()


def build_region_graph(X, cfg: StructureConfig) -> RegionGraph:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError("build_region_graph needs a non-empty N x D input matrix")
    N, D = X.shape
    if cfg.bounds is not None:
        lower = np.broadcast_to(np.asarray(cfg.bounds[0], dtype=float), (D,)).copy()
        upper = np.broadcast_to(np.asarray(cfg.bounds[1], dtype=float), (D,)).copy()
    else:
        lower, upper = X.min(axis=0), X.max(axis=0)
    deltas = _min_width(cfg, D)
    resolution = np.maximum(deltas, RESOLUTION_FRACTION * (upper - lower))

    rng = np.random.default_rng(cfg.rng_seed)
    root = Region(lower, upper, np.arange(N), id=0)
    regions = [root]
    by_key = {root.key: root}
    partitions: list[Partition] = []
    region_parts: dict[int, list[int]] = {}
    indivisible: set[int] = set()
    queue = deque([root])

    while queue:
        R = queue.popleft()
        if R.data_idx.size <= cfg.min_points:
            continue
        divisible = np.flatnonzero(R.width > resolution)
        made = 0
        for d in rng.permutation(divisible):
            d = int(d)
            t = _thresholds(R.lower[d], R.upper[d], cfg, deltas[d])
            if t.size == 0:
                continue
            which = np.searchsorted(t, X[R.data_idx, d], side="right")
            if np.bincount(which, minlength=t.size + 1).max() == R.data_idx.size:
                continue  # every row lands in one child: no progress along this axis
            edges = np.concatenate([[R.lower[d]], t, [R.upper[d]]])
            child_ids = []
            for i in range(t.size + 1):
                lo, hi = R.lower.copy(), R.upper.copy()
                lo[d], hi[d] = edges[i], edges[i + 1]
                key = tuple(lo.tolist()) + tuple(hi.tolist())
                sub = by_key.get(key)
                if sub is None:
                    sub = Region(lo, hi, R.data_idx[which == i], id=len(regions))
                    regions.append(sub)
                    by_key[key] = sub
                    queue.append(sub)
                child_ids.append(sub.id)
            p = Partition(len(partitions), R.id, d, t, child_ids)
            partitions.append(p)
            region_parts.setdefault(R.id, []).append(p.id)
            made += 1
            if made == cfg.partitions_per_region:
                break
        if made == 0:
            indivisible.add(R.id)
    return RegionGraph(regions, partitions, region_parts, indivisible, N)


def _init_kernel(tpl: KernelTemplate, region: Region, X, y_std: float, D: int) -> KernelSpec:
    width = np.where(region.width > 0, region.width, 1.0)
    if tpl.family == LINEAR:
        if tpl.sigma_f is not None:
            sf = tpl.sigma_f
        else:
            # keep the prior variance of f at a typical input near var(y)
            rms = math.sqrt(float(np.mean(np.sum(X * X, axis=1)))) if X.size else 1.0
            sf = y_std / (rms if rms > 0 else 1.0)
        return KernelSpec.create(LINEAR, D, sigma_f=sf)
    sf = tpl.sigma_f if tpl.sigma_f is not None else y_std
    if tpl.family == PERIODIC:
        ls = tpl.lengthscale if tpl.lengthscale is not None else 1.0
        per = tpl.period if tpl.period is not None else float(width[0]) / 2.0
        return KernelSpec.create(PERIODIC, D, sigma_f=sf, lengthscale=ls, period=per)
    ls = tpl.lengthscale if tpl.lengthscale is not None else width / 2.0
    return KernelSpec.create(tpl.family, D, sigma_f=sf, lengthscale=ls, nu=tpl.nu)


def build_spn(graph: RegionGraph, X, Y, cfg: StructureConfig) -> SpnGp:
    """Instantiate an SPN-GP from a region graph; leaves are built but not fitted."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] != graph.n_rows or Y.shape[0] != X.shape[0]:
        raise ValueError("dataset does not match the region graph")
    N, D = X.shape
    DY = Y.shape[1]
    y_offset = Y.mean(axis=0)
    y_std = Y.std(axis=0)
    y_std = np.where(y_std > 0, y_std, 1.0)
    Yc = Y - y_offset
    rng = np.random.default_rng([cfg.rng_seed, 1])

    nodes: dict[int, object] = {}
    next_id = itertools.count()
    output_roots = []

    for j in range(DY):
        scope = frozenset([j])
        region_sums: dict[int, list[int]] = {}
        for R in graph.regions:
            if graph.is_leaf(R.id):
                leaf_ids = []
                Xr = X[R.data_idx]
                noise = cfg.noise if cfg.noise is not None else 0.1 * y_std[j]
                for tpl in cfg.kernel_menu:
                    kern = _init_kernel(tpl, R, Xr, float(y_std[j]), D)
                    gp = GpLeaf(kern, math.log(noise), Xr, Yc[R.data_idx, j],
                                data_idx=R.data_idx, tag=(R.id, kern.label, j))
                    lid = next(next_id)
                    nodes[lid] = LeafNode(lid, scope, R, gp=gp)
                    leaf_ids.append(lid)
                sid = next(next_id)
                nodes[sid] = SumNode(sid, scope, R, leaf_ids, np.full(len(leaf_ids), -math.log(len(leaf_ids))))
                region_sums[R.id] = [sid]
            else:
                n_sum = 1 if R.id == 0 else cfg.sum_nodes_per_region
                region_sums[R.id] = []
                for _ in range(n_sum):
                    sid = next(next_id)
                    nodes[sid] = SumNode(sid, scope, R, [], np.zeros(0))
                    region_sums[R.id].append(sid)

        for P in graph.partitions:
            combos = list(itertools.product(*(region_sums[c] for c in P.children)))
            if len(combos) > cfg.max_split_nodes:
                keep = np.sort(rng.choice(len(combos), cfg.max_split_nodes, replace=False))
                combos = [combos[k] for k in keep]
            parent = graph.regions[P.parent]
            for combo in combos:
                pid = next(next_id)
                nodes[pid] = SplitNode(pid, scope, parent, axis=P.axis,
                                       thresholds=P.thresholds.copy(), child_ids=list(combo))
                for sid in region_sums[P.parent]:
                    nodes[sid].child_ids.append(pid)

        for sid in (s for ids in region_sums.values() for s in ids):
            s = nodes[sid]
            if s.log_weights.size != len(s.child_ids):
                s.log_weights = np.full(len(s.child_ids), -math.log(len(s.child_ids)))
        output_roots.append(region_sums[0][0])

    if DY == 1:
        root = output_roots[0]
    else:
        root = next(next_id)
        nodes[root] = ProductNode(root, frozenset(range(DY)), graph.root, list(output_roots))

    return SpnGp(nodes, root, D, DY, y_offset=y_offset, y_std=y_std,
                 X_train=X, Y_train=Y)


def build(X, Y, cfg: StructureConfig) -> SpnGp:
    """Region graph, SPN assembly and (if configured) overlap assignment in one call."""
    graph = build_region_graph(X, cfg)
    model = build_spn(graph, X, Y, cfg)
    if cfg.overlap != "none":
        assign_overlap(model, cfg)
    return model


def _leaf_regions(model: SpnGp) -> list[Region]:
    seen, out = set(), []
    for leaf in model.leaves():
        if id(leaf.region) not in seen:
            seen.add(id(leaf.region))
            out.append(leaf.region)
    return out


def overlap_rows(region: Region, root: Region, X, cfg: StructureConfig) -> np.ndarray:
    """Rows just across each interior face of ``region``."""
    if cfg.overlap == "none" or (cfg.overlap == "count" and cfg.overlap_count <= 0):
        return np.zeros(0, dtype=np.int64)
    D = X.shape[1]
    closed = region.upper == root.upper
    ge_lo = X >= region.lower
    lt_hi = (X < region.upper) | (closed & (X == region.upper))
    picked = []
    for d in range(D):
        others = np.ones(D, dtype=bool)
        others[d] = False
        in_slab = np.all((ge_lo & lt_hi)[:, others], axis=1)
        faces = []
        if region.lower[d] > root.lower[d]:
            faces.append((np.flatnonzero(in_slab & (X[:, d] < region.lower[d])), region.lower[d]))
        if region.upper[d] < root.upper[d]:
            faces.append((np.flatnonzero(in_slab & (X[:, d] >= region.upper[d])), region.upper[d]))
        for cand, face in faces:
            if cand.size == 0:
                continue
            dist = np.abs(X[cand, d] - face)
            if cfg.overlap == "count":
                order = np.lexsort((cand, dist))
                picked.append(cand[order[: cfg.overlap_count]])
            else:
                picked.append(cand[dist <= cfg.overlap_radius])
    if not picked:
        return np.zeros(0, dtype=np.int64)
    rows = np.unique(np.concatenate(picked))
    return np.setdiff1d(rows, region.data_idx)


def assign_overlap(model: SpnGp, cfg: StructureConfig) -> SpnGp:
    """Append borrowed boundary rows to every leaf (prediction only, not evidence)."""
    if cfg.overlap == "none":
        return model
    X, Y = model.X_train, model.Y_train
    root = model.root_node.region
    for region in _leaf_regions(model):
        region.overlap_idx = overlap_rows(region, root, X, cfg)
    for leaf in model.leaves():
        gp, reg = leaf.gp, leaf.region
        rows = np.concatenate([reg.data_idx, reg.overlap_idx])
        j = leaf.output
        gp.X = X[rows]
        gp.y = Y[rows, j] - model.y_offset[j]
        gp.overlap_count = int(reg.overlap_idx.size)
        gp.overlap_idx = reg.overlap_idx
        gp.invalidate()
    return model


def _split_groups(model: SpnGp, sum_node: SumNode) -> int:
    keys = {(model.nodes[c].axis, tuple(model.nodes[c].thresholds.tolist()))
            for c in sum_node.child_ids if isinstance(model.nodes[c], SplitNode)}
    return max(1, len(keys))


def complexity_report(model: SpnGp) -> dict:
    """Leaf block sizes and cubic fit cost against the uniform-data bound.

    The bound is ``S * K * N**3 / 2**(2 * h)`` per output network, where
    ``h`` is the number of halvings along the shallowest root-to-leaf path
    (a V-way split contributes ``log2(V)``).  Each halving cuts the cubic
    cost of the blocks below it by 4, hence the exponent ``2h``.
    """
    leaves = model.leaves()
    regions = _leaf_regions(model)
    N = int(model.root_node.region.data_idx.size)
    sums = model.sums()
    S = max((_split_groups(model, s) for s in sums if any(
        isinstance(model.nodes[c], SplitNode) for c in s.child_ids)), default=1)
    K = max(sum(1 for c in s.child_ids if isinstance(model.nodes[c], LeafNode)) for s in sums) \
        if sums else 1
    halv: dict[int, float] = {}
    for nid in model.topological_order():
        node = model.nodes[nid]
        if isinstance(node, LeafNode):
            halv[nid] = 0.0
        elif isinstance(node, SplitNode):
            halv[nid] = math.log2(len(node.child_ids)) + min(halv[c] for c in node.child_ids)
        else:
            halv[nid] = min(halv[c] for c in node.children)
    h = halv[model.root]
    cost = float(sum(float(l.gp.n_rows) ** 3 for l in leaves))
    bound = model.output_dim * S * K * float(N) ** 3 / 2.0 ** (2.0 * h)
    sizes = [int(r.data_idx.size) for r in regions]
    return {
        "n_rows": N,
        "n_leaves": len(leaves),
        "n_leaf_regions": len(regions),
        "leaf_sizes": sizes,
        "overlap_sizes": [int(r.overlap_idx.size) for r in regions],
        "max_block": max(sizes) if sizes else 0,
        "mean_block": float(np.mean([s for s in sizes if s > 0])) if any(sizes) else 0.0,
        "S": S,
        "K": K,
        "halvings": h,
        "cost": cost,
        "bound": bound,
        "bound_met": bool(cost <= bound * (1 + 1e-12)),
        "exponent_convention": "bound = D_Y*S*K*N^3 / 2^(2h), h = halvings on the shallowest path",
    }
