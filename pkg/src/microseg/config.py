"""Run configuration: nested dataclasses loaded from YAML with environment overrides.

Environment variables named ``MICROSEG__<SECTION>__<KEY>`` override config keys,
e.g. ``MICROSEG__OPTIMIZER__LR=3e-4`` or ``MICROSEG__VARIANT=SwinS``. Values are
parsed as YAML scalars.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .data import AugmentConfig, EpochPlan
from .inference import TilingConfig
from .losses import LossConfig
from .zoo import VARIANTS

ENV_PREFIX = "MICROSEG__"


class ConfigError(ValueError):
    pass


@dataclass
class OptimizerConfig:
    name: str = "adamw"
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_epochs: int = 5
    schedule: str = "cosine"

    def __post_init__(self):
        if self.name not in ("adamw", "adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.name!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")


@dataclass
class RunConfig:
    variant: str = "SwinS_TB_Skip"
    scale: str = "paper"
    dataset: str = "data"
    out_dir: str = "runs/default"
    seed: int = 0
    deterministic: bool = True
    val_fraction: float = 0.1
    val_every: int = 1
    max_steps: Optional[int] = None
    eval_mode: str = "auto"
    loss: LossConfig = field(default_factory=LossConfig)
    epoch: EpochPlan = field(default_factory=EpochPlan)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    tiling: TilingConfig = field(default_factory=TilingConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; valid names: {', '.join(VARIANTS)}")
        if self.eval_mode not in ("auto", "pad", "tile"):
            raise ConfigError(f"eval_mode must be auto, pad or tile, got {self.eval_mode!r}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"]["rotations"] = list(self.augment.rotations)
        d["augment"]["crop"] = list(self.augment.crop)
        return d

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _coerce(value, default, where: str):
    """Cast YAML scalars to the type of the field default (PyYAML reads ``1e-4`` as a string)."""
    if isinstance(default, bool) or default is None or default is dataclasses.MISSING:
        return value
    if isinstance(default, (int, float)) and isinstance(value, (str, int, float)) and not isinstance(value, bool):
        try:
            cast = type(default)(value)
        except ValueError as exc:
            raise ConfigError(f"{where}: expected a number, got {value!r}") from exc
        if isinstance(default, int) and cast != float(value):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return cast
    return value


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in data.items():
        default = fields[name].default_factory if fields[name].default_factory is not dataclasses.MISSING else None
        sub = default() if default is not None else None
        if dataclasses.is_dataclass(sub):
            kwargs[name] = _build(type(sub), value or {}, f"{where}.{name}".strip("."))
        else:
            kwargs[name] = _coerce(value, fields[name].default, f"{where}.{name}".strip("."))
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from exc


def apply_env(data: dict, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in key[len(ENV_PREFIX):].split("__")]
        node = data
        for p in path[:-1]:
            node = node.setdefault(p, {})
        node[path[-1]] = yaml.safe_load(raw)
    return data


def from_dict(data: dict, environ=None) -> RunConfig:
    return _build(RunConfig, apply_env(dict(data or {}), environ), "")


def load_config(path=None, environ=None, **overrides) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
    data = apply_env(data, environ)
    for k, v in overrides.items():
        if v is not None:
            data[k] = v
    return _build(RunConfig, data, "")
