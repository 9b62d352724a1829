"""
Run configuration: dataclasses, YAML loading and command-line overrides.

Precedence is CLI override > config file > dataclass default. Default optimizer
and loss weights: Adam, lr 1e-4, weight decay 1e-4, batch 16, w_h = 1, w_fid = 0.1.
"""
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import yaml

from src.errors import ConfigError
from src.losses import LossWeights

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WorldParams:
    image_size: int = 64
    noise_std: float = 0.03
    count_range: Tuple[int, int] = (1, 4)
    size_range: Tuple[float, float] = (8.0, 20.0)
    aspect_range: Tuple[float, float] = (0.5, 2.0)
    max_attempts: int = 100
    patch_size: int = 16

    def __post_init__(self):
        if self.image_size < 32:
            raise ConfigError(f"world.image_size must be >= 32, got {self.image_size}")
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ConfigError(f"world.count_range must satisfy 0 <= min <= max, got {self.count_range}")
        if self.size_range[0] < 2 or self.size_range[1] < self.size_range[0]:
            raise ConfigError(f"world.size_range invalid: {self.size_range}")
        if self.size_range[1] > self.image_size / 2:
            raise ConfigError("world.size_range exceeds the drivable capacity of the image")
        if self.aspect_range[0] <= 0 or self.aspect_range[1] < self.aspect_range[0]:
            raise ConfigError(f"world.aspect_range invalid: {self.aspect_range}")
        if self.patch_size < 8:
            raise ConfigError(f"world.patch_size must be >= 8, got {self.patch_size}")
        if self.max_attempts < 1:
            raise ConfigError("world.max_attempts must be positive")


@dataclass(frozen=True)
class NetParams:
    generator_channels: Tuple[int, int, int] = (16, 32, 32)
    discriminator_channels: Tuple[int, int, int] = (8, 16, 32)
    detector_channels: Tuple[int, int, int] = (16, 32, 32)
    grid_size: int = 8
    feature_dim: int = 16
    extractor_channels: Tuple[int, int] = (8, 16)
    extractor_seed: int = 20240131
    newton_schulz_iters: int = 30

    def __post_init__(self):
        if self.grid_size < 1:
            raise ConfigError("nets.grid_size must be positive")
        if self.feature_dim < 2:
            raise ConfigError("nets.feature_dim must be >= 2")
        if self.newton_schulz_iters < 1:
            raise ConfigError("nets.newton_schulz_iters must be >= 1")


@dataclass(frozen=True)
class StageSteps:
    pretrain: int = 2000
    joint: int = 3000
    retrain: int = 2000


@dataclass(frozen=True)
class AblationSwitches:
    use_generator: bool = True
    use_fid: bool = True
    use_hard_loss: bool = True


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    steps: StageSteps = field(default_factory=StageSteps)
    ablation: AblationSwitches = field(default_factory=AblationSwitches)
    world: WorldParams = field(default_factory=WorldParams)
    nets: NetParams = field(default_factory=NetParams)
    seed: int = 0
    n_clean: int = 800
    n_defected: int = 800
    reference_size: int = 512
    augment_images: int = 512
    real_fraction: float = 0.5
    retrain_from_joint: bool = False
    iou_threshold: float = 0.5
    fid_images: int = 512
    workers: int = 2
    prefetch_depth: int = 4

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (feature statistics need two rows)")
        if not 0.0 < self.real_fraction <= 1.0:
            raise ConfigError("real_fraction must lie in (0, 1]")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ConfigError("iou_threshold must lie in (0, 1]")
        if self.workers < 0 or self.prefetch_depth < 1:
            raise ConfigError("workers must be >= 0 and prefetch_depth >= 1")


_SECTIONS = {
    "weights": LossWeights,
    "steps": StageSteps,
    "ablation": AblationSwitches,
    "world": WorldParams,
    "nets": NetParams,
}


def _build(cls, values: Dict[str, Any], where: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in (values or {}).items():
        if key not in known:
            raise ConfigError(f"unknown configuration key '{where}{key}'")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"invalid section '{where.rstrip('.')}': {e}") from None


def config_from_dict(data: Dict[str, Any]) -> TrainConfig:
    """
    Build a TrainConfig from the nested mapping found in a YAML file.

    Top-level `train`, `eval` and `seeds` sections are flattened onto TrainConfig.
    """
    data = dict(data or {})
    top: Dict[str, Any] = {}
    for flat_section in ("train", "seeds", "eval"):
        top.update(data.pop(flat_section, None) or {})
    for name, cls in _SECTIONS.items():
        if name in data:
            top[name] = _build(cls, data.pop(name), f"{name}.")
    top.update(data)
    return _build(TrainConfig, top, "")


def load_config(path: Optional[str]) -> TrainConfig:
    if path is None:
        return TrainConfig()
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r") as f:
        try:
            data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from None
    config = config_from_dict(data)
    logger.info("Loaded configuration from %s", path)
    return config


def apply_overrides(config: TrainConfig, overrides: Dict[str, Any]) -> TrainConfig:
    """
    Apply dotted-key overrides, skipping None values.

    Args:
        config (TrainConfig): Base configuration.
        overrides (dict): e.g. {"lr": 2e-4, "weights.w_h": 0.5}.

    Returns:
        TrainConfig: A new configuration.
    """
    for key, value in overrides.items():
        if value is None:
            continue
        head, _, tail = key.partition(".")
        if not hasattr(config, head):
            raise ConfigError(f"unknown configuration key '{key}'")
        if tail:
            section = getattr(config, head)
            if not hasattr(section, tail):
                raise ConfigError(f"unknown configuration key '{key}'")
            config = dataclasses.replace(config, **{head: dataclasses.replace(section, **{tail: value})})
        else:
            config = dataclasses.replace(config, **{head: value})
    return config


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def config_to_dict(config: TrainConfig) -> Dict[str, Any]:
    raw = dataclasses.asdict(config)
    out: Dict[str, Any] = {"train": {}, "seeds": {}}
    for key, value in raw.items():
        if key in _SECTIONS:
            out[key] = _plain(value)
        elif key == "seed":
            out["seeds"][key] = value
        else:
            out["train"][key] = _plain(value)
    return out


def save_config(config: TrainConfig, path: str) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(config), f, sort_keys=True)
