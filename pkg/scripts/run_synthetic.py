"""Synthetic 1-D studies: kernel selection, noise recovery and boundary smoothing.

Writes plot-ready prediction CSVs under out/synthetic/.
"""

import argparse
import dataclasses
import math
import sys
from pathlib import Path

import numpy as np

from spngp.data import gen_heteroscedastic, gen_piecewise, heteroscedastic_noise
from spngp.hyperopt import OptimizerConfig, optimize_model
from spngp.pipeline import header_line, prediction_csv
from spngp.spn import LeafNode, posterior_update
from spngp.structure import StructureConfig, build

ROOT = Path(__file__).resolve().parents[1]


def kernel_selection(seed, out):
    d = gen_piecewise(seed, 200)
    cfg = StructureConfig(min_points=199, bounds=([0.0], [60.0]),
                          kernel_menu=[{"family": "linear"}, {"family": "se_ard"}])
    m = build(d.X, d.Y, cfg).fit_leaves()
    posterior_update(m)
    print("kernel weights per region")
    for s in m.sums():
        kids = [m.nodes[c] for c in s.child_ids]
        if all(isinstance(k, LeafNode) for k in kids):
            w = ", ".join(f"{k.gp.kernel.family}={p:.3f}" for k, p in zip(kids, s.weights))
            print(f"  [{s.region.lower[0]:g}, {s.region.upper[0]:g}): {w}")
    grid = np.linspace(0, 60, 601)[:, None]
    (out / "piecewise.csv").write_text(prediction_csv(m, grid, ["x"], ["y"], header_line("", f"seed={seed}")))


def noise_recovery(seed, out):
    d, _ = gen_heteroscedastic(seed, 2000)
    cfg = StructureConfig(min_points=300, bounds=([0.0], [10.0]), kernel_menu=[{"family": "se_ard"}])
    m = build(d.X, d.Y, cfg).fit_leaves()
    optimize_model(m, OptimizerConfig(max_iters=200))
    print("noise per region (estimated vs true RMS)")
    for leaf in sorted(m.leaves(), key=lambda l: l.region.lower[0]):
        lo, hi = leaf.region.lower[0], leaf.region.upper[0]
        true = math.sqrt(np.mean(heteroscedastic_noise(np.linspace(lo, hi, 101)) ** 2))
        print(f"  [{lo:6.3f}, {hi:6.3f}): {math.exp(leaf.gp.log_noise):.3f} vs {true:.3f}")
    posterior_update(m)
    grid = np.linspace(0, 10, 501)[:, None]
    (out / "heteroscedastic.csv").write_text(prediction_csv(m, grid, ["x"], ["y"], header_line("", f"seed={seed}")))


def boundary_smoothing(seed, out):
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(0, 1, 60))
    y = np.sin(2 * np.pi * x) + 0.1 * rng.standard_normal(60)
    base = StructureConfig(min_points=59, bounds=([0.0], [1.0]),
                           kernel_menu=[{"family": "se_ard", "sigma_f": 1.0, "lengthscale": 0.15}], noise=0.1)
    grid = np.linspace(0, 1, 401)[:, None]
    for c in (0, 3):
        cfg = dataclasses.replace(base, overlap="count" if c else "none", overlap_count=c)
        m = build(x[:, None], y, cfg).fit_leaves()
        posterior_update(m)
        (pm,) = m.predict(np.array([[0.5 - 1e-3], [0.5 + 1e-3]]))
        print(f"overlap c={c}: jump at the boundary {abs(pm.mean[1] - pm.mean[0]):.4f}")
        (out / f"overlap_c{c}.csv").write_text(prediction_csv(m, grid, ["x"], ["y"], header_line("", f"c={c}")))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=str(ROOT / "out" / "synthetic"))
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kernel_selection(args.seed, out)
    noise_recovery(args.seed, out)
    boundary_smoothing(args.seed, out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
