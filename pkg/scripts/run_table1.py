"""Benchmark table on the Energy and CCPP datasets.

Expects headered CSVs at data/energy.csv (targets Y1, Y2) and data/ccpp.csv
(target PE), or paths in SPNGP_ENERGY_CSV / SPNGP_CCPP_CSV.
"""

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from spngp.cli import cmd_eval
from spngp.config import load_config

ROOT = Path(__file__).resolve().parents[1]
DATASETS = {"energy": "SPNGP_ENERGY_CSV", "ccpp": "SPNGP_CCPP_CSV"}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--datasets", nargs="+", default=list(DATASETS), choices=list(DATASETS))
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args(argv)
    status = 0
    for name in args.datasets:
        cfg = load_config(ROOT / "configs" / f"{name}.json", args.seed)
        path = Path(os.environ.get(DATASETS[name]) or cfg.resolve(cfg.data.path))
        if not path.exists():
            print(f"{name}: {path} not found, skipping", file=sys.stderr)
            status = 1
            continue
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, path=str(path)))
        print(f"== {name}")
        cmd_eval(cfg, jobs=args.jobs)
    return status


if __name__ == "__main__":
    sys.exit(main())
