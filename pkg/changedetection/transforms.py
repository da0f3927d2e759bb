"""Registered augmentations for bi-temporal samples.

A sample is a dict with float images ``t1``/``t2`` (C x H x W, 0..255) and integer
masks ``label`` and optionally ``sem_t1``/``sem_t2`` (H x W). Geometric ops sample one
transform and apply it to every tensor; photometric ops touch images only.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torchvision.transforms.functional as TF

from .config import AugmentConfig, PhotometricConfig
from .exceptions import ShapeError

logger = logging.getLogger(__name__)

IMAGE_KEYS = ('t1', 't2')
MASK_KEYS = ('label', 'sem_t1', 'sem_t2')


def _keys(sample, keys):
    return [k for k in keys if sample.get(k) is not None]


def random_crop_pair(sample, size, rng):
    """Crop every tensor of the sample at one offset drawn uniformly; returns (sample, (row, col))."""
    h, w = sample['t1'].shape[-2:]
    if size > h or size > w:
        raise ShapeError(f"crop size {size} exceeds image size {h}x{w}")
    for key in _keys(sample, IMAGE_KEYS + MASK_KEYS):
        if tuple(sample[key].shape[-2:]) != (h, w):
            raise ShapeError(f"'{key}' is {tuple(sample[key].shape[-2:])}, expected {(h, w)}")
    row = int(rng.integers(0, h - size + 1))
    col = int(rng.integers(0, w - size + 1))
    out = dict(sample)
    for key in _keys(sample, IMAGE_KEYS + MASK_KEYS):
        out[key] = sample[key][..., row:row + size, col:col + size]
    return out, (row, col)


def flip_pair(sample, horizontal=False, vertical=False):
    dims = []
    if vertical:
        dims.append(-2)
    if horizontal:
        dims.append(-1)
    if not dims:
        return sample
    out = dict(sample)
    for key in _keys(sample, IMAGE_KEYS + MASK_KEYS):
        out[key] = torch.flip(sample[key], dims=dims)
    return out


def random_flip_pair(sample, prob, rng):
    horizontal = bool(rng.random() < prob)
    vertical = bool(rng.random() < prob)
    return flip_pair(sample, horizontal=horizontal, vertical=vertical)


@dataclass(frozen=True)
class PhotometricParams:
    """One draw of distortion parameters; ``None`` skips that distortion."""
    brightness: float | None = None
    contrast: float | None = None
    saturation: float | None = None
    hue: float | None = None  # degrees
    contrast_last: bool = False


def sample_photometric(cfg: PhotometricConfig, rng):
    def maybe(draw):
        return draw() if rng.random() < cfg.prob else None

    brightness = maybe(lambda: float(rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)))
    contrast = maybe(lambda: float(rng.uniform(*cfg.contrast_range)))
    saturation = maybe(lambda: float(rng.uniform(*cfg.saturation_range)))
    hue = maybe(lambda: float(rng.uniform(-cfg.hue_delta, cfg.hue_delta)))
    return PhotometricParams(brightness, contrast, saturation, hue, contrast_last=bool(rng.random() < 0.5))


def apply_photometric(image, params: PhotometricParams):
    """Brightness, contrast, saturation and hue on a 0..255 RGB image, re-quantized to integers."""
    x = image.float()
    if params.brightness is not None:
        x = (x + params.brightness).clamp(0, 255)
    if params.contrast is not None and not params.contrast_last:
        x = (x * params.contrast).clamp(0, 255)
    if params.saturation is not None or params.hue is not None:
        if x.shape[0] != 3:
            raise ShapeError(f"saturation and hue need RGB images, got {x.shape[0]} channels")
        unit = x / 255.0
        if params.saturation is not None:
            unit = TF.adjust_saturation(unit, params.saturation)
        if params.hue is not None:
            unit = TF.adjust_hue(unit, params.hue / 360.0)
        x = unit * 255.0
    if params.contrast is not None and params.contrast_last:
        x = (x * params.contrast).clamp(0, 255)
    return x.round().clamp(0, 255)


def photometric_pair(sample, cfg: PhotometricConfig, rng, params=None):
    """Photometric distortion of both phase images; masks pass through untouched."""
    out = dict(sample)
    for key in IMAGE_KEYS:
        # independent draw per phase unless params are given
        draw = params if params is not None else sample_photometric(cfg, rng)
        out[key] = apply_photometric(sample[key], draw)
    return out


def normalize_image(image, mean, std):
    mean = torch.as_tensor(mean, dtype=torch.float32).view(-1, 1, 1)
    std = torch.as_tensor(std, dtype=torch.float32).view(-1, 1, 1)
    if mean.shape[0] != image.shape[0]:
        raise ShapeError(f"{mean.shape[0]} normalization channels for a {image.shape[0]}-channel image")
    return (image.float() - mean) / std


class PairAugmentation:
    """Training-time pipeline: random crop, joint flips, per-image photometric distortion."""

    def __init__(self, cfg: AugmentConfig):
        self.cfg = cfg

    def __call__(self, sample, rng):
        if not self.cfg.enabled:
            return sample
        sample, _ = random_crop_pair(sample, self.cfg.crop_size, rng)
        sample = random_flip_pair(sample, self.cfg.flip_prob, rng)
        return photometric_pair(sample, self.cfg.photometric, rng)


def sample_rng(seed, epoch, index):
    """Independent generator per (seed, epoch, sample); worker assignment does not matter."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), int(index)]))
