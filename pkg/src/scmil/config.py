"""Experiment configuration and its versioned JSON file format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetSpec, ImbalanceSpec, ShiftSpec, SplitSizes
from .losses import CurriculumSpec
from .model import ModelDims

SCHEMA_VERSION = 1

METHODS = ("ERM-RS", "ERM-CB", "LDAM-DRW", "SC-MIL-RS", "SC-MIL-CB")
STAGES = ("single", "two")


class ConfigError(ValueError):
    pass


def default_shift() -> ShiftSpec:
    return ShiftSpec(scale=1.2, offset=0.3, noise=0.3, seed=7)


@dataclass
class ExperimentConfig:
    method: str = "SC-MIL-RS"
    stage: str = "single"
    rho: float = 10.0
    total: int = 288
    majority: int = 0
    bag_size: int = 32
    batch_size: int = 32
    steps: int = 3000
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_grad_norm: float | None = None
    tau: float = 1.0
    scl_reduction: str = "sum"
    curriculum: str = "linear"
    beta_start: float = 1.0
    beta_end: float = 0.0
    two_stage_split: float = 0.5
    ldam_max_margin: float = 0.5
    drw_beta: float = 0.9999
    drw_defer_fraction: float = 0.6
    d_h: int = 64
    d_f: int = 64
    d_a: int = 32
    d_z: int = 16
    data_seed: int = 0
    init_seed: int = 0
    sample_seed: int = 0
    eval_seed: int = 0
    val_every: int = 200
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    shift: ShiftSpec = field(default_factory=default_shift)
    splits: SplitSizes = field(default_factory=SplitSizes)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage mode {self.stage!r}")
        if self.stage == "two" and not self.is_contrastive:
            raise ConfigError("two-stage training needs an SC-MIL method")
        if self.lr <= 0 or self.tau <= 0:
            raise ConfigError("lr and tau must be positive")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < (2 if self.is_contrastive else 1):
            raise ConfigError("contrastive methods need batch_size >= 2")
        if self.bag_size < 1 or self.val_every < 0:
            raise ConfigError("bag_size must be >= 1 and val_every >= 0")
        if not 0.0 < self.two_stage_split < 1.0:
            raise ConfigError("two_stage_split must lie in (0, 1)")
        if self.curriculum not in ("linear", "constant"):
            raise ConfigError(f"unknown curriculum {self.curriculum!r}")
        if self.scl_reduction not in ("mean", "sum"):
            raise ConfigError(f"unknown scl_reduction {self.scl_reduction!r}")

    @property
    def is_contrastive(self) -> bool:
        return self.method.startswith("SC-MIL")

    @property
    def sampler(self) -> str:
        return "balanced" if self.method.endswith("-CB") else "random"

    @property
    def n_classes(self) -> int:
        return self.dataset.n_classes

    def dataset_spec(self) -> DatasetSpec:
        return dataclasses.replace(self.dataset, seed=self.data_seed)

    def imbalance(self) -> ImbalanceSpec:
        return ImbalanceSpec(self.rho, self.total, self.majority)

    def dims(self) -> ModelDims:
        return ModelDims(self.dataset.d_in, self.d_h, self.d_f, self.d_a, self.d_z, self.n_classes)

    def curriculum_spec(self) -> CurriculumSpec:
        return CurriculumSpec(max(self.steps, 1), self.curriculum, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        for key in ("dataset", "shift", "splits"):
            d[key] = {k: list(v) if isinstance(v, tuple) else v for k, v in d[key].items()}
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_NESTED = {"dataset": DatasetSpec, "shift": ShiftSpec, "splits": SplitSizes}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for k, v in raw.items():
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    version = raw.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    nested = {k: _build(cls, raw.pop(k), k) for k, cls in _NESTED.items() if k in raw}
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown keys {unknown}")
    try:
        return ExperimentConfig(**raw, **nested)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)


def save_config(path: str | Path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
