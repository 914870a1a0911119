"""Experiment configuration: JSON documents mirrored by dataclasses, dotted overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from .augment import OP_NAMES

METHODS = ("simclr", "non-bcl-fixed", "bcl-i", "bcl-d")
DEFAULT_K = {"bcl-i": 1, "bcl-d": 2, "non-bcl-fixed": 1}
DEFAULT_PRUNE_RATIO = 0.9
DEFAULT_FIXED_STRENGTH = 0.5


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    pool: str = ""
    test: str = ""
    height: int = 32
    width: int = 32
    num_classes: int = 10
    n_max: Optional[int] = None
    lt_seed: int = 0
    partition_scheme: str = "rank"


@dataclass
class ModelConfig:
    channels: List[int] = field(default_factory=lambda: [32, 64, 128, 256])
    hidden_dim: int = 256
    embed_dim: int = 128
    norm: str = "batch"
    groups: int = 8
    tau: float = 0.2
    prune_ratio: Optional[float] = None


@dataclass
class OptimConfig:
    name: str = "sgd"
    lr: float = 0.1
    lr_final: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass
class ProbeConfig:
    shots: Optional[int] = 100
    epochs: int = 100
    lr: float = 1e-2
    lr_final: float = 1e-6
    weight_decay: float = 5e-6
    batch_size: int = 256
    seed: int = 0


@dataclass
class ExperimentConfig:
    method: str = "simclr"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    imbalance_factor: float = 100.0
    epochs: int = 200
    warmup_epochs: int = 1
    batch_size: int = 256
    beta: float = 0.97
    k: Optional[int] = None
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    seed: int = 0
    out_dir: str = ""
    fixed_strength: Optional[float] = None
    forced_op: Optional[str] = None
    magnitude_table: Optional[str] = None
    magnitude_overrides: Dict[str, List[float]] = field(default_factory=dict)
    tail_ratio: float = 0.1
    workers: int = 0
    deterministic: bool = False
    keep_checkpoints: int = 0

    # -- resolved values --------------------------------------------------
    @property
    def augments(self) -> bool:
        return self.method != "simclr"

    @property
    def resolved_k(self) -> int:
        return self.k if self.k is not None else DEFAULT_K.get(self.method, 1)

    @property
    def resolved_prune_ratio(self) -> float:
        p = self.model.prune_ratio
        return DEFAULT_PRUNE_RATIO if p is None else p

    @property
    def resolved_fixed_strength(self) -> float:
        return DEFAULT_FIXED_STRENGTH if self.fixed_strength is None else self.fixed_strength

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.model.prune_ratio is not None:
            if self.method != "bcl-d":
                raise ConfigError("model.prune_ratio applies only to method bcl-d")
            if not 0.0 <= self.model.prune_ratio < 1.0:
                raise ConfigError("model.prune_ratio must lie in [0, 1)")
        if self.fixed_strength is not None:
            if self.method != "non-bcl-fixed":
                raise ConfigError("fixed_strength applies only to method non-bcl-fixed")
            if not 0.0 <= self.fixed_strength <= 1.0:
                raise ConfigError("fixed_strength must lie in [0, 1]")
        if self.k is not None:
            if not self.augments:
                raise ConfigError("k applies only to augmenting methods")
            if not 1 <= self.k <= len(OP_NAMES):
                raise ConfigError(f"k must lie in [1, {len(OP_NAMES)}]")
        if self.forced_op is not None:
            if not self.augments:
                raise ConfigError("forced_op applies only to augmenting methods")
            if self.forced_op not in OP_NAMES:
                raise ConfigError(f"unknown augmentation {self.forced_op!r}")
        for name in self.magnitude_overrides:
            if name not in OP_NAMES:
                raise ConfigError(f"unknown augmentation {name!r} in magnitude_overrides")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError("beta must lie in [0, 1)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 1 <= self.warmup_epochs <= self.epochs:
            raise ConfigError("warmup_epochs must lie in [1, epochs]")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.imbalance_factor < 1:
            raise ConfigError("imbalance_factor must be >= 1")
        if self.model.tau <= 0:
            raise ConfigError("model.tau must be positive")
        if self.workers < 0:
            raise ConfigError("workers must be >= 0")
        if not 0.0 < self.tail_ratio <= 1.0:
            raise ConfigError("tail_ratio must lie in (0, 1]")
        if not self.dataset.pool:
            raise ConfigError("dataset.pool is required")
        if self.optim.name not in ("sgd", "adam"):
            raise ConfigError("optim.name must be 'sgd' or 'adam'")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def snapshot(self, path) -> None:
        doc = self.to_dict()
        doc["resolved"] = {
            "k": self.resolved_k if self.augments else None,
            "prune_ratio": self.resolved_prune_ratio if self.method == "bcl-d" else None,
            "fixed_strength": self.resolved_fixed_strength if self.method == "non-bcl-fixed" else None,
        }
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def _build(cls, data: Dict[str, Any], where: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {where + key!r}")
        sub = _NESTED.get((cls, key))
        kwargs[key] = _build(sub, value, f"{where}{key}.") if sub else value
    return cls(**kwargs)


_NESTED = {
    (ExperimentConfig, "dataset"): DatasetConfig,
    (ExperimentConfig, "model"): ModelConfig,
    (ExperimentConfig, "optim"): OptimConfig,
    (ExperimentConfig, "probe"): ProbeConfig,
}


def from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    data = {k: v for k, v in data.items() if k != "resolved"}
    return _build(ExperimentConfig, data)


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(data)


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: ExperimentConfig, dotted: str, value: Any) -> ExperimentConfig:
    """Set ``a.b.c`` on the config tree; unknown keys raise ConfigError."""
    parts = dotted.split(".")
    target = cfg
    for i, part in enumerate(parts):
        names = {f.name for f in dataclasses.fields(target)}
        if part not in names:
            raise ConfigError(f"unknown config key {dotted!r}")
        if i == len(parts) - 1:
            if dataclasses.is_dataclass(getattr(target, part)):
                raise ConfigError(f"{dotted!r} is a section, not a value")
            setattr(target, part, value)
        else:
            target = getattr(target, part)
            if not dataclasses.is_dataclass(target):
                raise ConfigError(f"unknown config key {dotted!r}")
    return cfg


def apply_overrides(cfg: ExperimentConfig, pairs: List[str]) -> ExperimentConfig:
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} must look like key=value")
        key, _, raw = pair.partition("=")
        apply_override(cfg, key.strip(), parse_value(raw))
    return cfg
