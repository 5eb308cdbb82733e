"""Experiment configuration: strict, hierarchical, JSON-backed.

Unknown keys are rejected with the full key path so a typo never silently
falls back to a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_args, get_origin, get_type_hints

from .backbone import BackboneConfig
from .discriminator import DiscriminatorConfig
from .encoder import EncoderConfig
from .enhancer import EnhancerConfig
from .errors import ConfigurationError
from .metrics import MetricProtocol
from .scenegen import LayoutConfig
from .trainer import SamplerSettings, TrainConfig

_SCALAR_TYPES = (int, float, str, bool)


def _convert(tp, value, path: str):
    origin = get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigurationError(f"{path}: expected an object")
        return build_dataclass(tp, value, path)
    if origin is dict:
        _, vtype = get_args(tp)
        if not isinstance(value, dict):
            raise ConfigurationError(f"{path}: expected an object")
        return {k: _convert(vtype, v, f"{path}.{k}") for k, v in value.items()}
    if origin is tuple:
        args = get_args(tp)
        elem = args[0]
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{path}: expected an array")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(elem, v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigurationError(f"{path}: expected {len(args)} elements")
        return tuple(_convert(a, v, f"{path}[{i}]")
                     for i, (a, v) in enumerate(zip(args, value)))
    if origin is type(None):
        return None
    # unions like `int | None`
    if origin is not None or str(tp).startswith(("typing.Optional", "int | None")):
        args = get_args(tp)
        if args:
            if value is None and type(None) in args:
                return None
            for a in args:
                if a is type(None):
                    continue
                try:
                    return _convert(a, value, path)
                except ConfigurationError:
                    continue
            raise ConfigurationError(f"{path}: no union member matches {value!r}")
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected a boolean, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigurationError(f"{path}: unsupported config value {value!r}")


def build_dataclass(cls, data: dict, path: str = ""):
    """Build `cls` from a nested dict, rejecting unknown keys by path."""
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path or cls.__name__}: expected an object")
    hints = get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    for key in data:
        if key not in names:
            where = f"{path}.{key}" if path else key
            raise ConfigurationError(f"unknown config key: {where}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            sub = f"{path}.{f.name}" if path else f.name
            kwargs[f.name] = _convert(hints[f.name], data[f.name], sub)
    return cls(**kwargs)


@dataclass
class ExperimentConfig:
    seed: int = 0
    source_dir: str = ""
    target_dir: str = ""
    scene: LayoutConfig = field(default_factory=LayoutConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    enhancer: EnhancerConfig = field(default_factory=EnhancerConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricProtocol = field(default_factory=MetricProtocol)

    def validate(self, required_paths: tuple[str, ...] = ()) -> None:
        self.scene.validate()
        self.encoder.validate()
        self.enhancer.validate()
        self.train.validate()
        for attr in required_paths:
            value = getattr(self, attr)
            if not value:
                raise ConfigurationError(f"config field '{attr}' must be set")
            if not Path(value).exists():
                raise ConfigurationError(f"{attr} path does not exist: {value}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file not found: {p}")
    try:
        with open(p, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
    cfg = build_dataclass(ExperimentConfig, data)
    cfg.validate()
    return cfg


def save_config_snapshot(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, indent=1, sort_keys=True)
