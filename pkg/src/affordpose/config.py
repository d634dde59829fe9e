"""Configuration dataclasses and their file/flag plumbing."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .synth import WorldConfig


@dataclass
class ModelConfig:
    num_templates: int = 14
    num_keypoints: int = 16
    channels: int = 128  # C, scene feature channels
    feature_size: int = 28  # H_f = W_f
    embed_dim: int = 128  # d
    num_heads: int = 4
    scale_layers: int = 3
    offset_layers: int = 1
    mlp_hidden: int = 256
    ffn_dim: int = 256
    backbone: str = "small"  # "small" or "resnet18"
    backbone_widths: tuple = (16, 32, 64, 128)
    input_size: int = 224
    heatmap_sigma: float = 2.0  # pixels at 224 resolution
    roi_sampling: int = 2  # bilinear samples per ROI bin and axis
    query_self_attention: bool = True
    disc_hidden: int = 256

    def __post_init__(self):
        self.backbone_widths = tuple(int(w) for w in self.backbone_widths)
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.num_keypoints != 16:
            raise ValueError("poses have 16 keypoints")
        if self.backbone not in ("small", "resnet18"):
            raise ValueError(f"unknown backbone {self.backbone!r}")


@dataclass
class LossWeights:
    lambda_offset: float = 10.0
    lambda_scale: float = 10.0
    lambda_adv: float = 10.0
    lambda_dis: float = 1.0

    def __post_init__(self):
        if min(self.lambda_offset, self.lambda_scale, self.lambda_adv, self.lambda_dis) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class OptimConfig:
    optimizer: str = "sgd"
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    backbone_lr_mult: float = 0.1
    disc_lr: float = 1e-4
    batch_size: int = 8
    epochs_per_stage: int = 10
    max_stages: int = 5
    max_epochs: int = 0  # total budget across stages; 0 = unlimited
    patience: int = 2
    threshold: float = 0.7
    holdout_fraction: float = 0.1
    self_training: bool = True
    teacher_epochs: int = 10
    teacher_optimizer: str = "adamw"  # teacher pretraining runs on its own schedule
    teacher_lr: float = 1e-3
    seed: int = 0


@dataclass
class TemplateConfig:
    k_prime: int = 30
    k: int = 14
    selection: str = "maxmin"
    kmeans_iter: int = 100
    kmeans_restarts: int = 10


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    world: WorldConfig = field(default_factory=WorldConfig)
    templates: TemplateConfig = field(default_factory=TemplateConfig)
    paths: dict = field(default_factory=dict)

    SECTIONS = ("model", "optim", "loss", "world", "templates")

    def to_dict(self) -> dict:
        return {name: _plain(asdict(getattr(self, name))) for name in self.SECTIONS} | {"paths": dict(self.paths)}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        cfg = cls()
        cfg.update(doc)
        return cfg

    def update(self, doc: dict) -> None:
        """Merge a nested ``{section: {key: value}}`` or flat ``{key: value}`` mapping."""
        flat: dict[str, Any] = {}
        for key, value in doc.items():
            if key in self.SECTIONS and isinstance(value, dict):
                for k, v in value.items():
                    self.set(k, v, section=key)
            elif key == "paths" and isinstance(value, dict):
                self.paths.update(value)
            else:
                flat[key] = value
        for k, v in flat.items():
            self.set(k, v)

    def set(self, key: str, value: Any, section: Optional[str] = None) -> None:
        key = key.replace("-", "_")
        targets = [section] if section else [s for s in self.SECTIONS if key in _field_names(getattr(self, s))]
        if not targets:
            raise KeyError(f"unknown config key {key!r}")
        for name in targets:
            obj = getattr(self, name)
            if key not in _field_names(obj):
                raise KeyError(f"unknown config key {name}.{key}")
            setattr(self, name, _replace(obj, key, value))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path


def desk_config(**overrides) -> RunConfig:
    """Desk-scale preset: four-family synthetic world, K = K' = 4 and a narrow
    model on 64 px crops so a 2000-sample, 20-epoch run fits on one CPU.

    Learning rates are 10x the full-scale ones to suit the short schedule.
    """
    cfg = RunConfig()
    cfg.update({
        "model": {"num_templates": 4, "input_size": 64, "feature_size": 16, "channels": 64, "embed_dim": 64,
                  "ffn_dim": 128, "mlp_hidden": 128, "disc_hidden": 128},
        "optim": {"epochs_per_stage": 20, "max_epochs": 20, "lr": 1e-3, "disc_lr": 1e-3},
        "templates": {"k_prime": 4, "k": 4},
        "world": {"jitter": 0.02},
    })
    cfg.update(overrides)
    return cfg


def _field_names(obj) -> set[str]:
    return {f.name for f in fields(obj)}


def _replace(obj, key, value):
    kw = asdict(obj)
    kw[key] = value
    return type(obj)(**kw)


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def load_config_file(path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib

        return tomllib.loads(text)
    return json.loads(text)


def all_fields() -> dict[str, tuple[str, type, Any]]:
    """``key -> (section, type, default)`` for every config field."""
    out = {}
    cfg = RunConfig()
    for section in RunConfig.SECTIONS:
        obj = getattr(cfg, section)
        assert is_dataclass(obj)
        for f in fields(obj):
            out.setdefault(f.name, (section, type(getattr(obj, f.name)), getattr(obj, f.name)))
    return out
