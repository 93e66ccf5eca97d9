"""Run configuration: a strict, nested YAML schema covering every knob.

Unknown keys are rejected with their full path, so a typo in a config file
fails loudly instead of silently training with a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .augment import STRONG, WEAK, AugmentationPolicy
from .losses import LossWeights


class ConfigError(Exception):
    pass


@dataclass
class DataConfig:
    root: str = ""
    manifest: str = "manifest.txt"
    val_root: str = ""
    val_manifest: str = ""
    class_count: int = 0
    ignore_index: int = 255
    labeled_ratio: str = "1/20"
    split_seed: int = 0
    split_file: Optional[str] = None     # precomputed split; overrides ratio/seed
    domain_root: Optional[str] = None    # labeled source-domain set (adaptation)
    domain_manifest: Optional[str] = None


@dataclass
class ModelConfig:
    width: int = 64
    embed_dim: int = 256


@dataclass
class OptimConfig:
    lr0: float = 0.01
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    aug_weak: AugmentationPolicy = field(default_factory=lambda: dataclasses.replace(WEAK))
    aug_strong: AugmentationPolicy = field(default_factory=lambda: dataclasses.replace(STRONG))

    total_iters: int = 150000
    warmup_iters: int = 2000
    batch_labeled: int = 2
    batch_unlabeled: int = 2
    crop_size: Optional[int] = None      # None: use native image size
    num_augmentations: int = 2           # strong views per unlabeled image
    tau_start: float = 0.995
    tau_end: float = 1.0
    phi: float = 0.95
    psi: int = 256
    sharpen_s: float = 6.0
    val_interval: int = 1000
    checkpoint_interval: int = 0         # 0: only best + final
    seed: int = 0
    deterministic: bool = False
    class_balancing: bool = True
    domain_adaptation: bool = False
    contrastive_inputs: str = "both"     # labeled | unlabeled | both
    use_attention: bool = True           # ablation: constant ranking/weights
    use_quality_filter: bool = True      # ablation: admit all labeled features
    out_dir: str = "runs/default"

    def validate(self) -> None:
        if self.data.class_count < 1:
            raise ConfigError("data.class_count must be set (>= 1)")
        if not 0 <= self.warmup_iters < max(self.total_iters, 1):
            raise ConfigError(f"warmup_iters {self.warmup_iters} must be < "
                              f"total_iters {self.total_iters}")
        if self.num_augmentations < 1:
            raise ConfigError("num_augmentations must be >= 1")
        if self.optim.lr0 <= 0:
            raise ConfigError("optim.lr0 must be positive")
        if not 0.0 <= self.phi <= 1.0:
            raise ConfigError(f"phi must be in [0, 1], got {self.phi}")
        if self.psi < 1:
            raise ConfigError("psi must be >= 1")
        if not 0.0 <= self.tau_start <= self.tau_end <= 1.0:
            raise ConfigError("tau endpoints must satisfy 0 <= start <= end <= 1")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.contrastive_inputs not in ("labeled", "unlabeled", "both"):
            raise ConfigError(f"contrastive_inputs must be labeled/unlabeled/both, "
                              f"got {self.contrastive_inputs!r}")
        if self.domain_adaptation and not self.data.domain_manifest:
            raise ConfigError("domain_adaptation requires data.domain_manifest")


_SECTION_TYPES = {"data": DataConfig, "model": ModelConfig, "optim": OptimConfig,
                  "loss": LossWeights}


def _build_section(dc_type, values: dict, path: str):
    allowed = {f.name for f in dataclasses.fields(dc_type)}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"unknown config key {path}.{sorted(unknown)[0]}")
    if dc_type is AugmentationPolicy and "resize_range" in values:
        values = {**values, "resize_range": tuple(values["resize_range"])}
    try:
        return dc_type(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {path} section: {e}") from None


def config_from_dict(raw: dict) -> TrainConfig:
    """Build and validate a TrainConfig from a nested plain dict."""
    raw = dict(raw or {})
    kwargs = {}
    for name, dc_type in _SECTION_TYPES.items():
        if name in raw:
            kwargs[name] = _build_section(dc_type, raw.pop(name) or {}, name)
    aug = raw.pop("augmentation", None) or {}
    unknown_aug = set(aug) - {"weak", "strong"}
    if unknown_aug:
        raise ConfigError(f"unknown config key augmentation.{sorted(unknown_aug)[0]}")
    base = {"weak": dataclasses.asdict(WEAK), "strong": dataclasses.asdict(STRONG)}
    for kind in ("weak", "strong"):
        merged = {**base[kind], **(aug.get(kind) or {})}
        kwargs[f"aug_{kind}"] = _build_section(AugmentationPolicy, merged,
                                               f"augmentation.{kind}")
    top_allowed = {f.name for f in dataclasses.fields(TrainConfig)} \
        - set(_SECTION_TYPES) - {"aug_weak", "aug_strong"}
    unknown = set(raw) - top_allowed
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]}")
    cfg = TrainConfig(**kwargs, **raw)
    cfg.validate()
    return cfg


def load_config(path) -> TrainConfig:
    text = Path(path).read_text(encoding="utf-8")
    raw = yaml.safe_load(text)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw)


def config_to_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["augmentation"] = {"weak": d.pop("aug_weak"), "strong": d.pop("aug_strong")}
    for kind in ("weak", "strong"):
        rr = d["augmentation"][kind]["resize_range"]
        d["augmentation"][kind]["resize_range"] = list(rr)
    return d


def merge_overrides(base: dict, overrides: dict, path: str = "") -> dict:
    """Recursively overlay `overrides` onto a nested config dict."""
    out = dict(base)
    for key, value in (overrides or {}).items():
        where = f"{path}.{key}" if path else key
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge_overrides(out[key], value, where)
        else:
            out[key] = value
    return out
