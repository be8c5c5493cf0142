"""Command-line front end: ``spngp {train,predict,eval,sweep,validate}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, model_io
from .bench import evaluate
from .config import ConfigError, ExperimentConfig, load_config
from .data import DataError
from .pipeline import (PhaseError, Timer, dump_json, header_line, load_dataset, prediction_csv, sweep,
                       sweep_csv, train_model, train_report)
from .spn import validate

log = logging.getLogger("spngp")


def _out_dir(cfg: ExperimentConfig, override: str | None) -> Path:
    d = Path(override) if override else cfg.resolve(cfg.output.dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_train(cfg: ExperimentConfig, out: str | None = None, jobs: int = 1, verbose: bool = False) -> Path:
    """Train on the whole dataset; writes the model file, a report and a timing sidecar."""
    timer = Timer()
    with timer.phase("load_data"):
        data = load_dataset(cfg)
    model, info = train_model(data, cfg, jobs=jobs, verbose=verbose, timer=timer)
    d = _out_dir(cfg, out)
    meta = {"config_fingerprint": cfg.fingerprint, "seed": cfg.seed,
            "feature_names": list(data.feature_names), "target_names": list(data.target_names)}
    with timer.phase("serialize"):
        model_io.save(model, d / cfg.output.model, meta)
        dump_json(train_report(model, info, cfg, data), d / cfg.output.report)
    dump_json({"library_version": __version__, "config_fingerprint": cfg.fingerprint,
               "seconds": timer.times}, d / (cfg.output.report + ".timing.json"))
    log.info("model written to %s", d / cfg.output.model)
    return d / cfg.output.model


def read_query(path, feature_names: list, delimiter: str = ",") -> np.ndarray:
    """Query inputs from a headered CSV.

    Columns are matched by the training feature names when all are present,
    otherwise the file must have exactly one column per input dimension.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh, delimiter=delimiter)
                if r and any(c.strip() for c in r) and not r[0].startswith("#")]
    D = len(feature_names)
    if not rows:
        return np.zeros((0, D))
    header = [h.strip() for h in rows[0]]
    if all(f in header for f in feature_names):
        cols = [header.index(f) for f in feature_names]
    elif len(header) == D:
        cols = list(range(D))
    else:
        raise DataError(f"{path}: query has {len(header)} columns {header}, model expects {D} "
                        f"inputs {feature_names}")
    out = np.empty((len(rows) - 1, D))
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
        for k, c in enumerate(cols):
            try:
                out[r - 1, k] = float(row[c])
            except ValueError:
                raise DataError(f"{path}: row {r}, column {header[c]!r}: cannot parse {row[c]!r}") from None
    if not np.all(np.isfinite(out)):
        raise DataError(f"{path}: query contains non-finite values")
    return out


def cmd_predict(model_path, query_path, out_path, delimiter: str = ","):
    model, meta = model_io.load(model_path)
    feats = meta.get("feature_names") or [f"x{i + 1}" for i in range(model.input_dim)]
    targets = meta.get("target_names") or [f"y{j + 1}" for j in range(model.output_dim)]
    X = read_query(query_path, feats, delimiter)
    hdr = header_line(meta.get("config_fingerprint", ""), f"model={Path(model_path).name}")
    text = prediction_csv(model, X, feats, targets, hdr)
    if out_path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out_path).write_text(text)


def cmd_eval(cfg: ExperimentConfig, out: str | None = None, jobs: int = 1):
    data = load_dataset(cfg)
    name = cfg.data.generator or Path(cfg.data.path).stem
    report = evaluate(data, cfg, name=name, jobs=jobs)
    d = _out_dir(cfg, out)
    hdr = header_line(cfg.fingerprint)
    (d / cfg.output.eval_table).write_text(f"{hdr}\n# dataset={name} N={data.n} fingerprint={data.fingerprint}\n"
                                           + report.table() + "\n"
                                           + "".join(f"# {n}\n" for n in report.notes))
    with open(d / cfg.output.eval_csv, "w", newline="") as fh:
        fh.write(hdr + "\n")
        csv.writer(fh, lineterminator="\n").writerows(report.csv_rows())
    dump_json({"library_version": __version__, "config_fingerprint": cfg.fingerprint,
               "seconds": report.timing}, d / (cfg.output.eval_csv + ".timing.json"))
    print(report.table())
    return report


def cmd_sweep(cfg: ExperimentConfig, out: str | None = None, jobs: int = 1):
    data = load_dataset(cfg)
    rows, timing = sweep(data, cfg, jobs)
    d = _out_dir(cfg, out)
    (d / cfg.output.sweep_csv).write_text(sweep_csv(rows, cfg.fingerprint))
    dump_json({"library_version": __version__, "config_fingerprint": cfg.fingerprint,
               "seconds": timing}, d / (cfg.output.sweep_csv + ".timing.json"))
    for r in rows:
        print(f"O={r['min_points']:>6}  experts={r['n_experts']:>4}  "
              f"avg_pts={r['avg_points_per_expert']:>8.1f}  rmse={r['rmse']:.4f}  ratio={r['rmse_ratio']:.3f}")
    return rows


def cmd_validate(model_path) -> int:
    model, _ = model_io.load(model_path)
    problems = validate(model)
    for v in problems:
        print(f"node {v.node_id}: {v.rule} {v.detail}")
    if not problems:
        print(f"{model_path}: valid ({len(model.nodes)} nodes, {len(model.leaves())} leaves)")
    return 1 if problems else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spngp", description="SPN-GP regression experiments")
    p.add_argument("--version", action="version", version=f"spngp {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--verbose", "-v", action="store_true", help="log progress and optimizer traces")
    common.add_argument("--jobs", type=int, default=1, help="threads for leaf fitting/optimization")
    cfgp = argparse.ArgumentParser(add_help=False, parents=[common])
    cfgp.add_argument("--config", required=True, help="experiment config (JSON)")
    cfgp.add_argument("--seed", type=int, default=None, help="override the config seed")
    cfgp.add_argument("--out", default=None, help="output directory (default: config output.dir)")

    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[cfgp], help="train a model and write model + report")
    sub.add_parser("eval", parents=[cfgp], help="repeated-split benchmark against baselines")
    sub.add_parser("sweep", parents=[cfgp], help="RMSE against points per expert")
    pp = sub.add_parser("predict", parents=[common], help="predict at query points")
    pp.add_argument("--model", required=True)
    pp.add_argument("--query", required=True)
    pp.add_argument("--output", default="-", help="prediction CSV path ('-' for stdout)")
    pp.add_argument("--delimiter", default=",")
    pv = sub.add_parser("validate", parents=[common], help="check a model file")
    pv.add_argument("model")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        if args.command == "predict":
            cmd_predict(args.model, args.query, args.output, args.delimiter)
            return 0
        if args.command == "validate":
            return cmd_validate(args.model)
        cfg = load_config(args.config, args.seed)
        if args.command == "train":
            cmd_train(cfg, args.out, args.jobs, args.verbose)
        elif args.command == "eval":
            cmd_eval(cfg, args.out, args.jobs)
        elif args.command == "sweep":
            cmd_sweep(cfg, args.out, args.jobs)
        return 0
    except (PhaseError, ConfigError, DataError, model_io.ModelFormatError, OSError, ValueError,
            RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
