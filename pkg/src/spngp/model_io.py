"""Versioned JSON model files.

The file stores the training matrices, the region boxes with their row
indices, every node, and each leaf's kernel and noise parameters.  Leaf
factorizations are not stored; they are recomputed on load with the same
arithmetic, so a save/load round trip reproduces predictions bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import __version__
from .gp import GpLeaf
from .kernels import KernelSpec
from .spn import LeafNode, ProductNode, Region, SpnGp, SplitNode, SumNode

FORMAT = "spngp-model"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    pass


def _floats(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def _ints(a) -> list:
    return np.asarray(a, dtype=np.int64).tolist()


def model_to_dict(model: SpnGp, meta: dict | None = None) -> dict:
    regions: dict[int, Region] = {}
    for node in model.nodes.values():
        regions.setdefault(id(node.region), node.region)
    rindex = {rid: i for i, rid in enumerate(sorted(regions, key=lambda k: regions[k].id))}
    region_list = [None] * len(rindex)
    for k, i in rindex.items():
        r = regions[k]
        region_list[i] = {"id": r.id, "lower": _floats(r.lower), "upper": _floats(r.upper),
                          "data_idx": _ints(r.data_idx), "overlap_idx": _ints(r.overlap_idx)}

    nodes = []
    for nid in sorted(model.nodes):
        n = model.nodes[nid]
        d = {"id": nid, "scope": sorted(n.out_scope), "region": rindex[id(n.region)]}
        if isinstance(n, SumNode):
            d.update(kind="sum", children=list(n.child_ids), log_weights=_floats(n.log_weights))
        elif isinstance(n, ProductNode):
            d.update(kind="product", children=list(n.child_ids))
        elif isinstance(n, SplitNode):
            d.update(kind="split", axis=int(n.axis), thresholds=_floats(n.thresholds),
                     children=list(n.child_ids))
        else:
            gp = n.gp
            d.update(kind="leaf", kernel=gp.kernel.to_dict(), log_noise=float(gp.log_noise),
                     data_idx=_ints(gp.data_idx if gp.data_idx is not None else n.region.data_idx),
                     overlap_idx=_ints(gp.overlap_idx if gp.overlap_idx is not None else []),
                     tag=list(gp.tag) if isinstance(gp.tag, tuple) else gp.tag)
        nodes.append(d)

    return {
        "format": FORMAT,
        "version": MODEL_VERSION,
        "library_version": __version__,
        "meta": dict(meta or {}),
        "input_dim": model.input_dim,
        "output_dim": model.output_dim,
        "y_offset": _floats(model.y_offset),
        "y_std": _floats(model.y_std),
        "fingerprint": model.fingerprint,
        "posterior_applied": bool(model.posterior_applied),
        "X_train": _floats(model.X_train),
        "Y_train": _floats(model.Y_train),
        "root": model.root,
        "regions": region_list,
        "nodes": nodes,
    }


def model_from_dict(d: dict, fit: bool = True) -> SpnGp:
    if not isinstance(d, dict) or d.get("format") != FORMAT:
        raise ModelFormatError("not an SPN-GP model file")
    if d.get("version") != MODEL_VERSION:
        raise ModelFormatError(
            f"model file version {d.get('version')} is not supported by this library "
            f"(expects version {MODEL_VERSION}); retrain the model")
    try:
        D, DY = int(d["input_dim"]), int(d["output_dim"])
        X = np.asarray(d["X_train"], dtype=float).reshape(-1, D)
        Y = np.asarray(d["Y_train"], dtype=float).reshape(-1, DY)
        y_offset = np.asarray(d["y_offset"], dtype=float)
        regions = [Region(r["lower"], r["upper"], r["data_idx"], r["overlap_idx"], id=r["id"])
                   for r in d["regions"]]
        nodes = {}
        for n in d["nodes"]:
            nid, scope, reg = int(n["id"]), frozenset(n["scope"]), regions[n["region"]]
            kind = n["kind"]
            if kind == "sum":
                nodes[nid] = SumNode(nid, scope, reg, list(n["children"]),
                                     np.asarray(n["log_weights"], dtype=float))
            elif kind == "product":
                nodes[nid] = ProductNode(nid, scope, reg, list(n["children"]))
            elif kind == "split":
                nodes[nid] = SplitNode(nid, scope, reg, axis=int(n["axis"]),
                                       thresholds=np.asarray(n["thresholds"], dtype=float),
                                       child_ids=list(n["children"]))
            elif kind == "leaf":
                (j,) = scope
                own = np.asarray(n["data_idx"], dtype=np.int64)
                ovl = np.asarray(n["overlap_idx"], dtype=np.int64)
                rows = np.concatenate([own, ovl])
                tag = tuple(n["tag"]) if isinstance(n["tag"], list) else n["tag"]
                gp = GpLeaf(KernelSpec.from_dict(n["kernel"]), float(n["log_noise"]),
                            X[rows], Y[rows, j] - y_offset[j], overlap_count=int(ovl.size),
                            data_idx=own, overlap_idx=ovl, tag=tag)
                nodes[nid] = LeafNode(nid, scope, reg, gp=gp)
            else:
                raise ModelFormatError(f"node {nid}: unknown kind {kind!r}")
        model = SpnGp(nodes, int(d["root"]), D, DY, y_offset=y_offset,
                      y_std=np.asarray(d["y_std"], dtype=float), fingerprint=d.get("fingerprint", ""),
                      X_train=X, Y_train=Y, posterior_applied=bool(d["posterior_applied"]))
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise ModelFormatError(f"malformed model file: {type(e).__name__}: {e}") from e
    if fit:
        model.fit_leaves()
    return model


def dumps(model: SpnGp, meta: dict | None = None) -> str:
    return json.dumps(model_to_dict(model, meta), separators=(",", ":")) + "\n"


def save(model: SpnGp, path, meta: dict | None = None):
    Path(path).write_text(dumps(model, meta))


def load(path, fit: bool = True) -> tuple[SpnGp, dict]:
    """Read a model file; returns the model and its ``meta`` block."""
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"{path}: not valid JSON ({e})") from None
    return model_from_dict(d, fit), d.get("meta", {}) if isinstance(d, dict) else {}
