"""Run configuration: nested dataclasses <-> YAML, plus dotted-key overrides."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml

from .augment import AugmentConfig
from .contrastive import LossConfig
from .errors import ConfigError
from .model import EncoderSpec, ProjectorSpec


@dataclass
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")


@dataclass
class TrainConfig:
    total_epochs: int = 350
    warmup_epochs: int = 150
    batch_size: int = 256
    threshold: float = 0.5
    seed: int = 0
    rectify_lam: bool = False
    min_box: int = 8
    checkpoint_every: int = 50
    reference_mode: bool = True
    num_workers: int = 0
    log_object_counts: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    projector: ProjectorSpec = field(default_factory=ProjectorSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (0 <= self.warmup_epochs <= self.total_epochs):
            raise ConfigError(
                f"need 0 <= warmup_epochs <= total_epochs, got {self.warmup_epochs} / {self.total_epochs}"
            )
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if not (0.0 <= self.threshold < 1.0):
            raise ConfigError(f"threshold must be in [0, 1), got {self.threshold}")
        if self.min_box < 1:
            raise ConfigError("min_box must be >= 1")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")


@dataclass
class DataConfig:
    root: Optional[str] = None
    test_root: Optional[str] = None
    image_size: int = 64
    num_classes: int = 6


@dataclass
class DecoderSpec:
    hidden_dim: int = 64
    upsample_blocks: int = 1


@dataclass
class FinetuneConfig:
    fraction: float = 0.01
    epochs: int = 150
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    decoder: DecoderSpec = field(default_factory=DecoderSpec)

    def __post_init__(self):
        if not (0 < self.fraction <= 1):
            raise ConfigError(f"fraction must be in (0, 1], got {self.fraction}")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def set_seed(self, seed: int):
        self.train.seed = seed
        self.train.augment.seed = seed
        self.finetune.seed = seed


def toy_config(**train_overrides) -> RunConfig:
    """Desk-scale defaults: toy encoder, batch 32."""
    cfg = RunConfig()
    cfg.train.batch_size = 32
    for k, v in train_overrides.items():
        setattr(cfg.train, k, v)
    cfg.train.validate()
    return cfg


def to_dict(obj) -> Dict[str, Any]:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def from_dict(cls, data: Optional[Dict[str, Any]]):
    data = dict(data or {})
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            value = from_dict(tp, value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: Union[str, Path, None]) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return from_dict(RunConfig, data)


def dump_config(cfg: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(to_dict(cfg), fh, sort_keys=False)
    return path


def apply_overrides(cfg: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """Set dotted keys (``train.batch_size``) and re-validate by round-tripping."""
    data = to_dict(cfg)
    for key, raw in overrides.items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = yaml.safe_load(raw) if isinstance(raw, str) else raw
    return from_dict(RunConfig, data)
