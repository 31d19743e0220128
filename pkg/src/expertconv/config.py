"""Run configuration: one JSON document fully determines a run.

A RunConfig nests the task, backbone and loss settings next to the
trainer knobs. The file format is schema-versioned JSON; unknown or
ill-typed fields are rejected by name. A content hash over everything
that influences the trajectory (output location and checkpoint cadence
excluded) ties checkpoints to the configuration that produced them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

from .data import TaskSpec
from .losses import LossConfig
from .model import BackboneConfig

__all__ = [
    "RunConfig",
    "SCHEMA",
    "config_hash",
    "config_to_dict",
    "config_from_dict",
    "trajectory_dict",
    "load_config",
    "save_config",
    "current_lr",
]

SCHEMA = "run-config/v1"

# fields that do not affect the training trajectory
_HASH_EXCLUDED = ("out_dir", "checkpoint_every")


@dataclass
class RunConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 0.1
    batch_size: int = 32
    iterations: int = 300
    seed: int = 0
    adapt_expert_rates: bool = True
    weight_decay: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_points: tuple[float, ...] = (0.6, 0.85)
    reuse_gradients: bool = False
    checkpoint_every: int = 100
    out_dir: str = "runs/default"

    def __post_init__(self):
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must fit an unsigned 64-bit integer, got {self.seed}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError(f"lr_decay_factor must lie in (0, 1], got {self.lr_decay_factor}")
        self.lr_decay_points = tuple(self.lr_decay_points)
        if any(not 0 < p < 1 for p in self.lr_decay_points):
            raise ValueError(f"lr_decay_points must lie in (0, 1), got {self.lr_decay_points}")
        if list(self.lr_decay_points) != sorted(self.lr_decay_points):
            raise ValueError(f"lr_decay_points must be sorted, got {self.lr_decay_points}")
        if self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if self.backbone.in_channels != self.task.n_features + 1:
            raise ValueError(
                f"backbone.in_channels must be task.n_features + 1 (mask channel): "
                f"{self.backbone.in_channels} vs {self.task.n_features} + 1"
            )
        if self.backbone.classes != self.task.n_classes:
            raise ValueError(
                f"backbone.classes ({self.backbone.classes}) must match "
                f"task.n_classes ({self.task.n_classes})"
            )


_SECTIONS = {"task": TaskSpec, "backbone": BackboneConfig, "loss": LossConfig}

# tuple-typed fields that JSON round-trips as lists
_TUPLE_FIELDS = {
    "backbone": ("widths", "kernel_sizes", "strides"),
    "": ("lr_decay_points",),
}


def config_to_dict(cfg: RunConfig) -> dict:
    out = dataclasses.asdict(cfg)
    for section, names in _TUPLE_FIELDS.items():
        target = out[section] if section else out
        for name in names:
            target[name] = list(target[name])
    return out


def _build_section(cls, payload: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ValueError(f"unknown config field {section}.{sorted(unknown)[0]}")
    kwargs = dict(payload)
    for name in _TUPLE_FIELDS.get(section, ()):
        if name in kwargs:
            kwargs[name] = tuple(kwargs[name])
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ValueError("config must be a JSON object")
    payload = dict(data)
    payload.pop("schema", None)
    kwargs = {}
    for section, cls in _SECTIONS.items():
        raw = payload.pop(section, None)
        if raw is not None:
            if not isinstance(raw, dict):
                raise ValueError(f"config field {section} must be an object")
            kwargs[section] = _build_section(cls, raw, section)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(payload) - known
    if unknown:
        raise ValueError(f"unknown config field {sorted(unknown)[0]}")
    for name in _TUPLE_FIELDS[""]:
        if name in payload:
            payload[name] = tuple(payload[name])
    kwargs.update(payload)
    return RunConfig(**kwargs)


def trajectory_dict(cfg: RunConfig) -> dict:
    """Serialized config restricted to fields that affect the trajectory."""
    payload = config_to_dict(cfg)
    for name in _HASH_EXCLUDED:
        payload.pop(name, None)
    return payload


def config_hash(cfg: RunConfig) -> str:
    """sha256 over the canonical JSON, trajectory-relevant fields only."""
    canonical = json.dumps(trajectory_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    schema = data.get("schema")
    if schema is not None and schema != SCHEMA:
        raise ValueError(f"unsupported config schema {schema!r}, expected {SCHEMA!r}")
    return config_from_dict(data)


def save_config(cfg: RunConfig, path) -> None:
    payload = {"schema": SCHEMA, **config_to_dict(cfg)}
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def current_lr(cfg: RunConfig, iteration: int) -> float:
    """Step-decayed base rate for a 0-based iteration index."""
    passed = sum(
        1 for frac in cfg.lr_decay_points if iteration >= int(frac * cfg.iterations)
    )
    return cfg.lr * cfg.lr_decay_factor**passed