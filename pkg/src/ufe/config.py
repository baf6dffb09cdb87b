"""Run configuration file: one JSON object, unknown keys rejected at every level."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from pydantic import ConfigDict, TypeAdapter, ValidationError

from .augment import AugmentConfig
from .data import ConfigError, DatasetConfig
from .flow import FarnebackParams
from .losses import LossConfig
from .model import ModelConfig
from .train import TrainConfig

_NESTED = ("loss", "augment", "flow", "model")


@dataclass(frozen=True)
class TrainSection:
    """TrainConfig's scalar fields; nested sections live at the top level."""
    __pydantic_config__ = ConfigDict(extra="forbid")

    max_iterations: int = TrainConfig.max_iterations
    burn_in_iterations: int = TrainConfig.burn_in_iterations
    batch_labeled: int = TrainConfig.batch_labeled
    batch_unlabeled: int = TrainConfig.batch_unlabeled
    lr: float = TrainConfig.lr
    beta1: float = TrainConfig.beta1
    beta2: float = TrainConfig.beta2
    adam_eps: float = TrainConfig.adam_eps
    eval_every: int = TrainConfig.eval_every
    checkpoint_every: int = TrainConfig.checkpoint_every
    labeled_fraction: float = TrainConfig.labeled_fraction
    mode: str = TrainConfig.mode
    eval_split: str = TrainConfig.eval_split


@dataclass(frozen=True)
class RunConfig:
    __pydantic_config__ = ConfigDict(extra="forbid")

    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    flow: FarnebackParams = field(default_factory=FarnebackParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    output_dir: Optional[str] = None
    seed: int = 0

    def train_config(self, **overrides) -> TrainConfig:
        scalars = {f.name: getattr(self.train, f.name) for f in fields(TrainSection)}
        scalars.update(overrides)
        cfg = TrainConfig(seed=self.seed, loss=self.loss, augment=self.augment, flow=self.flow,
                          model=replace(self.model, audio_dim=self.dataset.audio_dim), **scalars)
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_ADAPTER = TypeAdapter(RunConfig)


def parse_config(obj: dict) -> RunConfig:
    try:
        cfg = _ADAPTER.validate_python(obj)
    except ValidationError as e:
        raise ConfigError(f"invalid config:\n{e}") from None
    except ValueError as e:
        raise ConfigError(f"invalid config: {e}") from None
    cfg.dataset.validate()
    cfg.train_config()  # runs TrainConfig's own checks
    return cfg


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return parse_config({})
    try:
        obj = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except ValueError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"config file {path} must contain a JSON object")
    return parse_config(obj)
