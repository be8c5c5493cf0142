"""Experiment configuration: strict, versioned JSON files.

Unknown keys anywhere are rejected so that a typo cannot silently fall back
to a default.  The experiment seed is mandatory; every random stream in a
run derives from it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .hyperopt import OptimizerConfig
from .structure import StructureConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str | None = None
    targets: list = field(default_factory=list)
    delimiter: str = ","
    generator: str | None = None
    n: int | None = None

    def __post_init__(self):
        if (self.path is None) == (self.generator is None):
            raise ConfigError("data: give exactly one of 'path' or 'generator'")
        if self.path is not None and not self.targets:
            raise ConfigError("data: 'targets' is required with 'path'")
        if self.generator is not None and self.n is None:
            raise ConfigError("data: 'n' is required with 'generator'")


@dataclass
class OptimizerSection:
    enabled: bool = False
    max_iters: int = 200
    grad_tol: float = 1e-4
    init_step: float = 0.05
    max_move: float = 1.0
    restarts: int = 0
    tie_mode: str = "independent"
    fix_noise: bool = False
    noise_floor: float = 1e-4

    def build(self, seed: int, verbose: bool = False) -> OptimizerConfig:
        kw = {k: v for k, v in dataclasses.asdict(self).items() if k != "enabled"}
        return OptimizerConfig(seed=seed, verbose=verbose, **kw)


@dataclass
class FullGpConfig:
    enabled: bool = True
    cap: int = 5000
    kernel: str = "se_ard"
    optimize: bool = True
    max_iters: int = 100


@dataclass
class EvalConfig:
    runs: int = 5
    train_fraction: float = 0.8
    overlap_variant: bool = True

    def __post_init__(self):
        if self.runs < 1:
            raise ConfigError("eval.runs must be >= 1")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("eval.train_fraction must lie in (0, 1)")


@dataclass
class SweepConfig:
    min_points: list = field(default_factory=lambda: [2000, 1000, 500, 250, 125])
    train_fraction: float = 0.8
    # "full_gp": fit SE-ARD hyperparameters once on a full GP and reuse them for every O
    hyperparameters: str = "full_gp"
    hyper_subset: int = 500

    def __post_init__(self):
        if not self.min_points or any(int(o) < 1 for o in self.min_points):
            raise ConfigError("sweep.min_points must be a non-empty list of positive integers")
        if self.hyperparameters not in ("full_gp", "init"):
            raise ConfigError("sweep.hyperparameters must be 'full_gp' or 'init'")


@dataclass
class OutputConfig:
    dir: str = "out"
    model: str = "model.json"
    report: str = "report.json"
    predictions: str = "predictions.csv"
    eval_table: str = "eval.txt"
    eval_csv: str = "eval.csv"
    sweep_csv: str = "sweep.csv"


@dataclass
class ExperimentConfig:
    seed: int
    data: DataConfig
    structure: StructureConfig = field(default_factory=StructureConfig)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    full_gp: FullGpConfig = field(default_factory=FullGpConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    version: int = CONFIG_VERSION
    base_dir: str = "."
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def fingerprint(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def structure_for(self, seed: int, overlap: str | None = None) -> StructureConfig:
        s = dataclasses.replace(self.structure, rng_seed=seed)
        if overlap is not None:
            s = dataclasses.replace(s, overlap=overlap)
        return s

    def with_seed(self, seed: int) -> "ExperimentConfig":
        raw = dict(self.raw, seed=seed)
        return from_dict(raw, self.base_dir)


def _strict(cls, d, where: str, skip=()):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(names)}")
    try:
        return cls(**d)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def from_dict(d: dict, base_dir=".") -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root must be an object")
    allowed = {"version", "seed", "data", "structure", "optimizer", "full_gp", "eval", "sweep", "output"}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"config: unknown key(s) {unknown}; allowed: {sorted(allowed)}")
    version = d.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version {version} is not supported (expected {CONFIG_VERSION})")
    if "seed" not in d:
        raise ConfigError("config: 'seed' is required")
    seed = d["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("config: 'seed' must be a non-negative integer")
    if "data" not in d:
        raise ConfigError("config: 'data' is required")
    return ExperimentConfig(
        seed=seed,
        data=_strict(DataConfig, d["data"], "data"),
        structure=_strict(StructureConfig, d.get("structure", {}), "structure", skip=("rng_seed",)),
        optimizer=_strict(OptimizerSection, d.get("optimizer", {}), "optimizer"),
        full_gp=_strict(FullGpConfig, d.get("full_gp", {}), "full_gp"),
        eval=_strict(EvalConfig, d.get("eval", {}), "eval"),
        sweep=_strict(SweepConfig, d.get("sweep", {}), "sweep"),
        output=_strict(OutputConfig, d.get("output", {}), "output"),
        version=version,
        base_dir=str(base_dir),
        raw=json.loads(json.dumps(d)),
    )


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if seed is not None:
        d["seed"] = seed
    return from_dict(d, path.parent)
