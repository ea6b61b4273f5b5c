"""Training configuration and its JSON schema."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from ..fusion import KINDS, LEVELS
from ..model import CONV_KINDS, HEADS, BackboneSpec

PRECISIONS = {"float64": np.float64, "float32": np.float32}
CLASSIFIER_INITS = ("scratch", "places_head")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    base_lr: float = 0.15
    reference_batch: int = 256
    momentum: float = 0.9
    lr_decay: float = 0.1
    schedule_step: int = 15
    batch_size: int = 64
    gamma: float = 1.0
    seed: int = 0
    conv_kind: str = "partial"
    head: str = "conv1x1_gap"
    blocks: tuple = ((16, 2), (32, 2), (64, 2))
    fusion_kind: Optional[str] = None
    fusion_level: str = "feature"
    fusion_bn: bool = False
    ccm_relu: bool = True
    freeze_object_net: bool = False
    scl_in_fusion: bool = True
    classifier_init: str = "scratch"
    augment: bool = True
    flip: bool = True
    scale_range: tuple = (1.0, 1.25)
    precision: str = "float64"
    label: str = ""

    def __post_init__(self):
        self.blocks = tuple(tuple(int(v) for v in b) for b in self.blocks)
        self.scale_range = tuple(float(v) for v in self.scale_range)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        for name in ("base_lr", "momentum", "lr_decay"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("reference_batch", "schedule_step", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.momentum >= 1:
            raise ConfigError(f"momentum must be < 1, got {self.momentum}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be non-negative, got {self.gamma}")
        if self.conv_kind not in CONV_KINDS:
            raise ConfigError(f"conv_kind must be one of {CONV_KINDS}, got {self.conv_kind!r}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.fusion_kind is not None and self.fusion_kind not in KINDS:
            raise ConfigError(f"fusion.kind must be one of {KINDS}, got {self.fusion_kind!r}")
        if self.fusion_level not in LEVELS:
            raise ConfigError(f"fusion.level must be one of {LEVELS}, got {self.fusion_level!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {tuple(PRECISIONS)}, got {self.precision!r}")
        if self.classifier_init not in CLASSIFIER_INITS:
            raise ConfigError(f"classifier_init must be one of {CLASSIFIER_INITS}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def backbone_spec(self) -> BackboneSpec:
        return BackboneSpec(blocks=self.blocks, conv_kind=self.conv_kind, head=self.head)

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.fusion_kind is None:
            return f"places_{self.conv_kind}_g{self.gamma:g}"
        bn = "_bn" if self.fusion_bn else ""
        return f"{self.fusion_level}_{self.fusion_kind}{bn}_g{self.gamma:g}"

    def replace(self, **kw) -> "TrainConfig":
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)

    def to_json(self) -> dict:
        d = asdict(self)
        d["blocks"] = [list(b) for b in self.blocks]
        d["scale_range"] = list(self.scale_range)
        d["fusion"] = {"kind": d.pop("fusion_kind"), "level": d.pop("fusion_level"),
                       "bn": d.pop("fusion_bn"), "ccm_relu": d.pop("ccm_relu")}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        fusion = d.pop("fusion", None)
        if fusion is not None:
            if not isinstance(fusion, dict):
                raise ConfigError("'fusion' must be an object with kind/level/bn/ccm_relu")
            for k, v in fusion.items():
                if k not in ("kind", "level", "bn", "ccm_relu"):
                    raise ConfigError(f"unknown fusion key {k!r}")
                d["ccm_relu" if k == "ccm_relu" else f"fusion_{k}"] = v
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None


def load_config(path) -> TrainConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    with open(p) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON ({e})") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return TrainConfig.from_json(d)


def apply_overrides(cfg: TrainConfig, pairs) -> TrainConfig:
    """Apply ``key=value`` strings; values are parsed as JSON when possible."""
    d = cfg.to_json()
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        if key.startswith("fusion."):
            d["fusion"][key.split(".", 1)[1]] = val
        else:
            d[key] = val
    return TrainConfig.from_json(d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear-scaled base rate with step decay."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.base_lr * (cfg.batch_size / cfg.reference_batch) * cfg.lr_decay ** (epoch // cfg.schedule_step)
