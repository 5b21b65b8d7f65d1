"""Run configuration: one JSON file with model/train/data/eval sections."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .encoder import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSection:
    hidden_dim: int = 64
    layers: int = 4
    heads: int = 4
    max_seq: int = 128
    patch_size: int = 4
    image_channels: int = 1
    lora_rank: int = 0
    lora_alpha: float = 16.0

    def model_config(self) -> ModelConfig:
        return ModelConfig(**asdict(self))


@dataclass(frozen=True)
class TrainSection:
    batch_size: int = 64
    sub_batch_size: int = 8
    steps: int = 500
    lr: float = 1e-3
    temperature: float = 0.02
    seed: int = 0
    with_instructions: bool = True
    dtype: str = "float32"


@dataclass(frozen=True)
class DataSection:
    train_manifest: str | None = None
    task_registry: str | None = None


@dataclass(frozen=True)
class EvalSection:
    manifest: str | None = None
    report_path: str | None = None
    with_instructions: bool = True


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    base_dir: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        t = self.train
        if t.sub_batch_size < 1 or t.sub_batch_size > t.batch_size:
            raise ConfigError("train.sub_batch_size must be in [1, batch_size]")
        if t.temperature <= 0:
            raise ConfigError("train.temperature must be positive")
        if t.steps < 1:
            raise ConfigError("train.steps must be >= 1")
        if t.lr < 0:
            raise ConfigError("train.lr must be >= 0")
        if t.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype must be float32 or float64")
        try:
            self.model.model_config()
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from exc

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def to_json(self) -> dict:
        return {s: asdict(getattr(self, s)) for s in ("model", "train", "data", "eval")}


_SECTIONS = {"model": ModelSection, "train": TrainSection, "data": DataSection, "eval": EvalSection}


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in raw.items():
        default = getattr(cls(), k)
        if isinstance(default, bool) and not isinstance(v, bool):
            raise ConfigError(f"{where}.{k} must be a boolean")
        if isinstance(default, int) and not isinstance(default, bool) and (isinstance(v, bool) or not isinstance(v, int)):
            raise ConfigError(f"{where}.{k} must be an integer")
        if isinstance(default, float) and (isinstance(v, bool) or not isinstance(v, (int, float))):
            raise ConfigError(f"{where}.{k} must be a number")
        kwargs[k] = float(v) if isinstance(default, float) else v
    return cls(**kwargs)


def parse_config(raw: dict, base_dir: str | os.PathLike = ".") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    sections = {name: _build(cls, raw.get(name, {}), name) for name, cls in _SECTIONS.items()}
    return RunConfig(**sections, base_dir=Path(base_dir))


def load_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(raw, path.parent)
