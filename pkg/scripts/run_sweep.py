"""RMSE against points per expert on the seeded synthetic surface."""

import argparse
import sys
from pathlib import Path

from spngp.cli import cmd_sweep
from spngp.config import load_config

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "sweep.json"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--out", default=None)
    args = ap.parse_args(argv)
    worst = 0.0
    for seed in args.seeds:
        cfg = load_config(args.config, seed)
        out = f"{args.out}/seed{seed}" if args.out else None
        print(f"== seed {seed}")
        rows = cmd_sweep(cfg, out)
        worst = max(worst, max(r["rmse_ratio"] for r in rows))
    print(f"largest RMSE ratio to the full GP: {worst:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
