"""Typed run configuration.

The run-config file is YAML with the sections ``encoder``, ``taps``, ``bitab``,
``bridging``, ``data``, ``optim``, ``schedule``, ``aris`` and ``inference``.
Validation lives in :mod:`changedetection.serializers`; this module holds the
dataclasses the rest of the package consumes, and the named presets.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml
from django.conf import settings

from .exceptions import ConfigurationError

logger = logging.getLogger(__name__)

HEAD_BINARY = 'binary_change'
HEAD_SCD = 'scd'

# Shapes of the foundation encoders the framework knows how to host. The /16 presets are
# supervised ViT layouts; /14 and /32 are CLIP visual towers (pre-norm, QuickGELU).
ENCODER_PRESETS = {
    'toy': dict(patch_size=8, embed_dim=64, depth=4, num_heads=4, ffn_ratio=4.0,
                pretrain_resolution=64, use_class_token=True, pre_norm=False, activation='gelu'),
    'vit-b/16': dict(patch_size=16, embed_dim=768, depth=12, num_heads=12, ffn_ratio=4.0,
                     pretrain_resolution=224, use_class_token=True, pre_norm=False, activation='gelu'),
    'vit-b/32': dict(patch_size=32, embed_dim=768, depth=12, num_heads=12, ffn_ratio=4.0,
                     pretrain_resolution=224, use_class_token=True, pre_norm=True, activation='quick_gelu'),
    'vit-l/16': dict(patch_size=16, embed_dim=1024, depth=24, num_heads=16, ffn_ratio=4.0,
                     pretrain_resolution=224, use_class_token=True, pre_norm=False, activation='gelu'),
    'vit-l/14': dict(patch_size=14, embed_dim=1024, depth=24, num_heads=16, ffn_ratio=4.0,
                     pretrain_resolution=224, use_class_token=True, pre_norm=True, activation='quick_gelu'),
    'vit-l/14-336': dict(patch_size=14, embed_dim=1024, depth=24, num_heads=16, ffn_ratio=4.0,
                         pretrain_resolution=336, use_class_token=True, pre_norm=True, activation='quick_gelu'),
}

# Scalable stacked-blocks Bi-TAB widths.
BITAB_PRESETS = {
    'stacked-blocks-tiny': dict(stage_channels=[16, 32, 64, 128], stage_strides=[4, 2, 2, 2], head_channels=32),
    'stacked-blocks': dict(stage_channels=[32, 64, 128, 256], stage_strides=[4, 2, 2, 2], head_channels=64),
    'stacked-blocks-large': dict(stage_channels=[64, 128, 256, 512], stage_strides=[4, 2, 2, 2], head_channels=128),
}

# Benchmarks the framework is set up for; split sizes are the published ones.
DATASET_PRESETS = {
    'levir-cd': dict(image_size=1024, crop_size=512, num_classes=2, splits=(445, 64, 128),
                     layout='split_folders', label_divisor=255),
    's2looking': dict(image_size=1024, crop_size=512, num_classes=2, splits=(3500, 500, 1000),
                      layout='s2looking', label_divisor=255),
    'whu-cd': dict(image_size=256, crop_size=256, num_classes=2, splits=(5947, 743, 744),
                   layout='manifest', label_divisor=255),
    'landsat-scd': dict(image_size=416, crop_size=416, num_classes=2, num_semantic_classes=5,
                        split_fractions=(0.6, 0.2, 0.2), layout='manifest'),
}


@dataclass(frozen=True)
class ViTConfig:
    patch_size: int
    embed_dim: int
    depth: int
    num_heads: int
    ffn_ratio: float = 4.0
    pretrain_resolution: int = 224
    use_class_token: bool = True
    pre_norm: bool = False
    activation: str = 'gelu'
    in_channels: int = 3

    def __post_init__(self):
        problems = []
        if self.patch_size < 1:
            problems.append(f"patch_size must be >= 1, got {self.patch_size}")
        if self.depth < 1:
            problems.append(f"depth must be >= 1, got {self.depth}")
        if self.num_heads < 1 or self.embed_dim % self.num_heads:
            problems.append(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if self.patch_size >= 1 and self.pretrain_resolution % self.patch_size:
            problems.append(
                f"pretrain_resolution {self.pretrain_resolution} is not divisible by patch_size {self.patch_size}"
            )
        if self.activation not in ('gelu', 'quick_gelu'):
            problems.append(f"unknown activation '{self.activation}'")
        if problems:
            raise ConfigurationError('; '.join(problems))

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self):
        return int(round(self.ffn_ratio * self.embed_dim))

    @property
    def pretrain_grid(self):
        return self.pretrain_resolution // self.patch_size

    @classmethod
    def from_preset(cls, name, **overrides):
        if name not in ENCODER_PRESETS:
            raise ConfigurationError(f"unknown encoder preset '{name}' (known: {', '.join(ENCODER_PRESETS)})")
        return cls(**{**ENCODER_PRESETS[name], **overrides})


@dataclass(frozen=True)
class TapSet:
    """Encoder block indices (1-based) whose outputs feed the bridging modules."""
    indices: tuple

    def __post_init__(self):
        indices = tuple(int(i) for i in self.indices)
        object.__setattr__(self, 'indices', indices)
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ConfigurationError(f"tap indices must be strictly increasing, got {list(indices)}")
        if indices and indices[0] < 1:
            raise ConfigurationError(f"tap indices start at 1, got {indices[0]}")

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def check_depth(self, depth):
        if self.indices and self.indices[-1] > depth:
            raise ConfigurationError(f"tap index {self.indices[-1]} exceeds encoder depth {depth}")

    @classmethod
    def evenly_spaced(cls, depth, count):
        """J block indices spread evenly and ending at the last block (24, 4 -> 6, 12, 18, 24)."""
        if count < 1:
            return cls(())
        if count > depth:
            raise ConfigurationError(f"cannot place {count} taps on an encoder of depth {depth}")
        return cls(tuple((j + 1) * depth // count for j in range(count)))


@dataclass(frozen=True)
class BiTabSpec:
    stage_channels: tuple = (32, 64, 128, 256)
    stage_strides: tuple = (4, 2, 2, 2)
    head_kind: str = HEAD_BINARY
    num_semantic_classes: int = 0
    head_channels: int = 64
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, 'stage_channels', tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, 'stage_strides', tuple(int(s) for s in self.stage_strides))
        if not self.stage_channels:
            raise ConfigurationError("a Bi-TAB needs at least one stage")
        if len(self.stage_channels) != len(self.stage_strides):
            raise ConfigurationError(
                f"{len(self.stage_channels)} stage channels but {len(self.stage_strides)} stage strides"
            )
        if any(s < 1 for s in self.stage_strides) or any(c < 1 for c in self.stage_channels):
            raise ConfigurationError("stage strides and channels must be >= 1")
        if self.head_kind not in (HEAD_BINARY, HEAD_SCD):
            raise ConfigurationError(f"unknown head_kind '{self.head_kind}'")
        if self.head_kind == HEAD_SCD and self.num_semantic_classes < 2:
            raise ConfigurationError("an SCD head needs num_semantic_classes >= 2")
        if self.head_kind == HEAD_BINARY and self.num_semantic_classes:
            raise ConfigurationError(
                f"num_semantic_classes={self.num_semantic_classes} given for a binary head; set head_kind to 'scd'"
            )

    @property
    def num_stages(self):
        return len(self.stage_channels)

    @property
    def is_scd(self):
        return self.head_kind == HEAD_SCD

    @property
    def total_stride(self):
        stride = 1
        for s in self.stage_strides:
            stride *= s
        return stride


@dataclass(frozen=True)
class BridgingConfig:
    enabled: bool = True
    affinity: str = 'dot'  # 'dot' as the formula writes it, 'cosine' L2-normalizes rows first
    zero_init: bool = False
    init_range: float = 0.02


@dataclass(frozen=True)
class PhotometricConfig:
    prob: float = 0.5
    brightness_delta: float = 32.0
    contrast_range: tuple = (0.5, 1.5)
    saturation_range: tuple = (0.5, 1.5)
    hue_delta: float = 18.0


@dataclass(frozen=True)
class AugmentConfig:
    crop_size: int = 512
    flip_prob: float = 0.5
    photometric: PhotometricConfig = field(default_factory=PhotometricConfig)
    seed: int = 0
    enabled: bool = True


@dataclass(frozen=True)
class DataConfig:
    root: str = ''
    layout: str = 'split_folders'
    preset: str = ''
    batch_size: int = 8
    num_workers: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    label_fraction: float = 1.0
    mean: tuple = (123.675, 116.28, 103.53)
    std: tuple = (58.395, 57.12, 57.375)
    ignore_index: int = 255
    label_divisor: int = 1  # 255 for 0/255 change masks
    synthetic_samples: int = 8
    synthetic_size: int = 64
    train_split: str = 'train'
    val_split: str = 'val'
    test_split: str = 'test'

    @property
    def crop_size(self):
        return self.augment.crop_size


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 1e-4
    head_lr_mult: float = 10.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass(frozen=True)
class ScheduleConfig:
    max_iters: int = 40000
    power: float = 1.0
    min_lr: float = 0.0
    eval_interval: int = 4000
    log_interval: int = 50


@dataclass(frozen=True)
class InferenceConfig:
    window: int = 512
    stride: int = 256
    fps_warmup: int = 2


@dataclass(frozen=True)
class EncoderConfig:
    vit: ViTConfig
    checkpoint: str = ''
    preset: str = ''
    init_seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    name: str
    encoder: EncoderConfig
    taps: TapSet
    bitab: BiTabSpec
    bridging: BridgingConfig = field(default_factory=BridgingConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    aris_target: int = 0
    seed: int = 0
    work_dir: str = ''
    source_path: str = ''

    def __post_init__(self):
        if self.bridging.enabled:
            self.taps.check_depth(self.encoder.vit.depth)
            if len(self.taps) != self.bitab.num_stages:
                raise ConfigurationError(
                    f"{len(self.taps)} encoder taps but {self.bitab.num_stages} Bi-TAB stages"
                )
        if self.aris_target < 1:
            object.__setattr__(self, 'aris_target', self.encoder.vit.pretrain_resolution)

    # Flat accessors for the optimizer / schedule recipe.
    @property
    def base_lr(self):
        return self.optim.base_lr

    @property
    def head_lr_mult(self):
        return self.optim.head_lr_mult

    @property
    def max_iters(self):
        return self.schedule.max_iters

    @property
    def batch_size(self):
        return self.data.batch_size

    @property
    def crop_size(self):
        return self.data.crop_size

    @property
    def eval_interval(self):
        return self.schedule.eval_interval

    @property
    def output_dir(self):
        base = Path(self.work_dir) if self.work_dir else Path(settings.BAN_WORK_DIR) / self.name
        return base

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


def load_run_config(path, overrides=None):
    """Read a YAML run-config, validate it and return a :class:`RunConfig`."""
    from .serializers import RunConfigSerializer

    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"run-config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding='utf-8')) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"cannot parse {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path} must hold a mapping of sections")
    raw.setdefault('name', path.stem)
    if overrides:
        raw = _merge(raw, overrides)

    run = RunConfigSerializer(data=raw).build()
    run = replace(run, source_path=str(path))
    logger.debug(f"Loaded run-config '{run.name}' from {path}")
    return run


def _merge(base, overrides):
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged
