"""Random valid SPN-GP structures and the brute-force induced-tree oracle."""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.special import logsumexp

from spngp.gp import GpLeaf
from spngp.kernels import KernelSpec
from spngp.spn import (
    LeafNode, ProductNode, Region, SpnGp, SplitNode, SumNode, count_induced_trees, enumerate_induced_trees, route,
)

FAMILIES = ["se_ard", "linear", "matern", "periodic"]


def _rows_in(X, lower, upper, root_upper):
    closed = upper == root_upper
    inside = (X >= lower) & ((X < upper) | (closed & (X == upper)))
    return np.flatnonzero(inside.all(axis=1))


class _Builder:
    def __init__(self, rng, X, Y, max_depth, max_fanout, share_prob):
        self.rng, self.X, self.Y = rng, X, Y
        self.max_depth, self.max_fanout, self.share_prob = max_depth, max_fanout, share_prob
        self.nodes = {}
        self.ids = itertools.count()
        self.D = X.shape[1]
        self.root_upper = np.ones(self.D)

    def region(self, lower, upper):
        return Region(lower, upper, _rows_in(self.X, lower, upper, self.root_upper))

    def leaf(self, reg, j):
        fam = FAMILIES[self.rng.integers(len(FAMILIES) if self.D == 1 else 3)]
        nu = float(self.rng.choice([0.5, 1.5, 2.5]))
        ls = self.rng.uniform(0.2, 1.0, self.D)
        spec = KernelSpec.create(fam, self.D, sigma_f=self.rng.uniform(0.5, 1.5),
                                 lengthscale=float(ls[0]) if fam == "periodic" else ls, period=self.rng.uniform(0.3, 1.0),
                                 nu=nu)
        y = self.Y[reg.data_idx, j]
        gp = GpLeaf(spec, math.log(self.rng.uniform(0.1, 0.5)), self.X[reg.data_idx], y, data_idx=reg.data_idx)
        nid = next(self.ids)
        self.nodes[nid] = LeafNode(nid, frozenset([j]), reg, gp=gp)
        return nid

    def split(self, reg, j, depth, axis=None, t=None, kids=None):
        d = int(self.rng.integers(self.D)) if axis is None else axis
        if t is None:
            k = int(self.rng.integers(1, 3))
            t = np.sort(self.rng.uniform(reg.lower[d], reg.upper[d], k))
            t = np.unique(np.round(t, 3))
            t = t[(t > reg.lower[d]) & (t < reg.upper[d])]
            if t.size == 0:
                t = np.array([(reg.lower[d] + reg.upper[d]) / 2])
        if kids is None:
            edges = np.concatenate([[reg.lower[d]], t, [reg.upper[d]]])
            kids = []
            for i in range(t.size + 1):
                lo, hi = reg.lower.copy(), reg.upper.copy()
                lo[d], hi[d] = edges[i], edges[i + 1]
                kids.append(self.sum(self.region(lo, hi), j, depth + 1))
        nid = next(self.ids)
        self.nodes[nid] = SplitNode(nid, frozenset([j]), reg, axis=d, thresholds=np.asarray(t, float),
                                    child_ids=list(kids))
        return nid, d, t, kids

    def sum(self, reg, j, depth):
        k = int(self.rng.integers(1, self.max_fanout + 1))
        children, last = [], None
        for _ in range(k):
            if depth >= self.max_depth or self.rng.random() < 0.4:
                children.append(self.leaf(reg, j))
            elif last is not None and self.rng.random() < self.share_prob:
                # same partition, same sub-networks: makes the graph a DAG
                nid, *_ = self.split(reg, j, depth, *last)
                children.append(nid)
            else:
                nid, d, t, kids = self.split(reg, j, depth)
                last = (d, t, kids)
                children.append(nid)
        nid = next(self.ids)
        w = self.rng.dirichlet(np.ones(k))
        lw = np.log(w)
        lw -= logsumexp(lw)
        self.nodes[nid] = SumNode(nid, frozenset([j]), reg, children, lw)
        return nid


def random_model(seed, D=None, DY=None, n=None, max_depth=3, max_fanout=3, share_prob=0.3,
                 tree_cap=100_000, fit=True) -> SpnGp:
    """A random valid SPN-GP on the unit box with at most ``tree_cap`` induced trees."""
    rng = np.random.default_rng(seed)
    while True:
        D_ = D or int(rng.integers(1, 3))
        DY_ = DY or int(rng.choice([1, 1, 2]))
        n_ = n or int(rng.integers(5, 60))
        X = rng.uniform(0, 1, (n_, D_))
        Y = np.column_stack([np.sin(4 * X.sum(axis=1) + j) for j in range(DY_)]) + 0.1 * rng.standard_normal((n_, DY_))
        b = _Builder(rng, X, Y, max_depth, max_fanout, share_prob)
        root_reg = b.region(np.zeros(D_), np.ones(D_))
        outs = [b.sum(root_reg, j, 0) for j in range(DY_)]
        if DY_ == 1:
            root = outs[0]
        else:
            root = next(b.ids)
            b.nodes[root] = ProductNode(root, frozenset(range(DY_)), root_reg, outs)
        model = SpnGp(b.nodes, root, D_, DY_, X_train=X, Y_train=Y)
        if count_induced_trees(model) <= tree_cap:
            if fit:
                model.fit_leaves()
            return model


# --------------------------------------------------------------------------
# oracle


def tree_log_joint(model, trees):
    """log p(T) + sum of leaf log evidences, per induced tree."""
    return np.array([t.log_prior + sum(model.nodes[l].gp.log_evidence for l in t.leaves) for t in trees])


def oracle_log_evidence(model, trees=None):
    trees = trees if trees is not None else enumerate_induced_trees(model)
    return float(logsumexp(tree_log_joint(model, trees)))


def oracle_posterior_weights(model, trees=None):
    """Posterior probability of each sum edge given its sum node is in the tree."""
    trees = trees if trees is not None else enumerate_induced_trees(model)
    lj = tree_log_joint(model, trees)
    post = np.exp(lj - logsumexp(lj))
    edge_mass, node_mass = {}, {}
    for p, t in zip(post, trees):
        for s, c in t.edges:
            edge_mass[(s, c)] = edge_mass.get((s, c), 0.0) + p
            node_mass[s] = node_mass.get(s, 0.0) + p
    out = {}
    for s in model.sums():
        out[s.id] = np.array([edge_mass.get((s.id, c), 0.0) / node_mass[s.id] for c in s.child_ids])
    return out


def oracle_predict(model, Xs, trees=None, posterior=True):
    """Mixture moments over induced trees, one (mean, var_f, var_y) triple per output."""
    trees = trees if trees is not None else enumerate_induced_trees(model)
    lj = tree_log_joint(model, trees) if posterior else np.array([t.log_prior for t in trees])
    p = np.exp(lj - logsumexp(lj))
    M = Xs.shape[0]
    moments = {}
    for leaf in model.leaves():
        pm = leaf.gp.predict(Xs)
        moments[leaf.id] = (pm.mean, pm.var_f, pm.var_y)
    res = [tuple(np.zeros(M) for _ in range(3)) for _ in range(model.output_dim)]
    for i, x in enumerate(Xs):
        hits = route(model, x, trees)
        assert all(len(h) == model.output_dim for h in hits)
        for j in range(model.output_dim):
            picked = [next(l for l in h if model.nodes[l].output == j) for h in hits]
            m, vf, vy = (np.array([moments[l][k][i] for l in picked]) for k in range(3))
            mean = p @ m
            res[j][0][i] = mean + model.y_offset[j]
            res[j][1][i] = p @ (vf + m**2) - mean**2
            res[j][2][i] = p @ (vy + m**2) - mean**2
    return res


def query_points(model, rng, m=10):
    """Uniform points plus points sitting exactly on split thresholds and the root faces."""
    D = model.input_dim
    X = rng.uniform(0, 1, (m, D))
    splits = [n for n in model.nodes.values() if isinstance(n, SplitNode)]
    for k in range(min(3, len(splits))):
        s = splits[int(rng.integers(len(splits)))]
        x = rng.uniform(s.region.lower, s.region.upper)
        x[s.axis] = s.thresholds[int(rng.integers(s.thresholds.size))]
        X[k] = x
    X[-1] = np.ones(D)
    return X
