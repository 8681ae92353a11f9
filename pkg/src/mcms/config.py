"""Run configuration: one JSON object covering model architecture and
training hyperparameters, with strict unknown-key rejection so typos
fail loudly instead of silently training the wrong thing."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .model import ModelConfig

__all__ = ["RunConfig", "load_config", "config_from_dict", "write_resolved_config"]


@dataclass(frozen=True)
class RunConfig:
    """Everything a training or evaluation run needs besides data paths."""

    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-4
    batch: int = 8
    steps: int = 300
    crop: int = 256
    seed: int = 0

    def validate(self) -> None:
        self.model.validate()
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.crop < 32 or self.crop % 32 != 0:
            raise ValueError(f"crop must be a multiple of 32, got {self.crop}")
        if self.seed < 0:
            raise ValueError(f"seed must be nonnegative, got {self.seed}")

    def to_dict(self) -> dict:
        return {
            "model": dataclasses.asdict(self.model),
            "lr": self.lr,
            "batch": self.batch,
            "steps": self.steps,
            "crop": self.crop,
            "seed": self.seed,
        }


_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_RUN_KEYS = {"model", "lr", "batch", "steps", "crop", "seed"}


def config_from_dict(raw: dict) -> RunConfig:
    """Build a validated RunConfig; any unknown key is an error naming it."""
    if not isinstance(raw, dict):
        raise ValueError(f"config must be a JSON object, got {type(raw).__name__}")
    unknown = set(raw) - _RUN_KEYS
    if unknown:
        raise ValueError(f"unknown config key {sorted(unknown)[0]!r}")
    model_raw = raw.get("model", {})
    if not isinstance(model_raw, dict):
        raise ValueError("config key 'model' must be an object")
    unknown = set(model_raw) - _MODEL_KEYS
    if unknown:
        raise ValueError(f"unknown config key 'model.{sorted(unknown)[0]}'")
    model = ModelConfig(**model_raw)
    cfg = RunConfig(model=model, **{k: v for k, v in raw.items() if k != "model"})
    cfg.validate()
    return cfg


def load_config(path: str) -> RunConfig:
    """Parse a JSON config file; defaults fill whatever is absent."""
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValueError(f"malformed config {path}: {e}") from None
    return config_from_dict(raw)


def write_resolved_config(cfg: RunConfig, out_dir: str) -> str:
    """Echo the fully-resolved config next to a run's outputs."""
    path = os.path.join(out_dir, "resolved_config.json")
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)
        fh.write("\n")
    return path
