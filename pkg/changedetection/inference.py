"""Sliding-window prediction, evaluation and throughput benchmarking."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import torch
from django.conf import settings

from .bitab import ChangeLogits
from .exceptions import ConfigurationError, DataError, InferenceError, ShapeError
from .metrics import ConfusionCounts, MetricReport, confusion_update, merge_counts

logger = logging.getLogger(__name__)


@dataclass
class ChangePrediction:
    change: torch.Tensor  # B x H x W, 0 / 1
    semantic_t1: torch.Tensor | None = None  # B x H x W class indices
    semantic_t2: torch.Tensor | None = None

    @property
    def is_scd(self):
        return self.semantic_t1 is not None


@dataclass
class BenchResult:
    fps: float
    seconds: float
    n_images: int
    resolution: int
    aris_target: int


def window_offsets(size, window, stride):
    """Start offsets along one axis; the last window is shifted back to end at the border."""
    count = max(size - window + stride - 1, 0) // stride + 1
    offsets = []
    for i in range(count):
        start = min(i * stride, size - window)
        if not offsets or offsets[-1] != start:
            offsets.append(max(start, 0))
    return offsets


def _pair(value):
    """An int or an (h, w) pair as an (h, w) tuple."""
    if isinstance(value, (tuple, list)):
        return int(value[0]), int(value[1])
    return int(value), int(value)


def window_grid(height, width, window, stride):
    """Row-major (top, left) window corners; window and stride may be ints or (h, w) pairs."""
    (win_h, win_w), (stride_h, stride_w) = _pair(window), _pair(stride)
    return [(top, left) for top in window_offsets(height, win_h, stride_h)
            for left in window_offsets(width, win_w, stride_w)]


def clamp_window(height, width, window, stride):
    """Per-axis window and stride no larger than the image, for rasters smaller than the window on one side."""
    (win_h, win_w), (stride_h, stride_w) = _pair(window), _pair(stride)
    win_h, win_w = min(win_h, height), min(win_w, width)
    return (win_h, win_w), (min(stride_h, win_h), min(stride_w, win_w))


def _check_window(height, width, window, stride):
    (win_h, win_w), (stride_h, stride_w) = _pair(window), _pair(stride)
    if min(win_h, win_w, stride_h, stride_w) < 1:
        raise ConfigurationError(f"window {window} and stride {stride} must be positive")
    if stride_h > win_h or stride_w > win_w:
        raise ConfigurationError(f"stride {stride} exceeds window {window}")
    if win_h > height or win_w > width:
        raise ShapeError(f"window {window} exceeds image size {height}x{width}")


@torch.no_grad()
def sliding_window_infer(model, x1, x2, window, stride):
    """Average per-window logits over overlapping windows; returns ChangeLogits at full size."""
    if x1.shape != x2.shape:
        raise ShapeError(f"phase images differ in shape: {tuple(x1.shape)} vs {tuple(x2.shape)}")
    height, width = x1.shape[-2:]
    _check_window(height, width, window, stride)
    win_h, win_w = _pair(window)
    sums = None
    count = x1.new_zeros((1, 1, height, width))
    for top, left in window_grid(height, width, window, stride):
        crop = (..., slice(top, top + win_h), slice(left, left + win_w))
        out = model(x1[crop], x2[crop])
        parts = [out.change] + ([out.semantic_t1, out.semantic_t2] if out.is_scd else [])
        if sums is None:
            sums = [x1.new_zeros((x1.shape[0], p.shape[1], height, width)) for p in parts]
        for total, part in zip(sums, parts):
            total[crop] += part
        count[crop] += 1
    if (count == 0).any():
        uncovered = int((count == 0).sum())
        raise InferenceError(f"{uncovered} pixels were not covered by any window "
                             f"(window {window}, stride {stride}, image {height}x{width})")
    averaged = [total / count for total in sums]
    return ChangeLogits(*averaged)


def to_prediction(logits: ChangeLogits):
    """Argmax per pixel (first maximum wins); unchanged pixels get semantic class 0."""
    change = logits.change.argmax(dim=1)
    if not logits.is_scd:
        return ChangePrediction(change)
    sem1 = logits.semantic_t1.argmax(dim=1) * change
    sem2 = logits.semantic_t2.argmax(dim=1) * change
    return ChangePrediction(change, sem1, sem2)


@torch.no_grad()
def predict(model, x1, x2, window=None, stride=None):
    """Full forward when the image fits one window, sliding windows otherwise.

    A raster narrower than the window on one axis is tiled with the window clamped to that axis.
    """
    was_training = model.training
    model.eval()
    try:
        height, width = x1.shape[-2:]
        if window is None or (height <= _pair(window)[0] and width <= _pair(window)[1]):
            logits = model(x1, x2)
        else:
            window, stride = clamp_window(height, width, window, stride or window)
            logits = sliding_window_infer(model, x1, x2, window, stride)
    finally:
        model.train(was_training)
    return to_prediction(logits)


def semantic_classes_of(model):
    """Semantic class count of an SCD head, 0 for a binary head."""
    spec = model.bitab.spec
    return spec.num_semantic_classes if spec.is_scd else 0


@torch.no_grad()
def evaluate(model, loader, device='cpu', ignore_index=255, window=None, stride=None, exclude_no_change=False):
    """Accumulate confusion counts image by image and reduce them to a MetricReport.

    Semantic labels are only read when the model carries an SCD head.
    """
    num_semantic_classes = semantic_classes_of(model)
    scd = num_semantic_classes > 0
    total = ConfusionCounts.empty(num_semantic_classes)
    for batch in loader:
        if scd and 'sem_t1' not in batch:
            raise DataError("an SCD model needs semantic labels for both phases to be evaluated")
        x1, x2 = batch['t1'].to(device), batch['t2'].to(device)
        pred = predict(model, x1, x2, window, stride)
        for b in range(x1.shape[0]):
            counts = confusion_update(ConfusionCounts.empty(num_semantic_classes), pred.change[b],
                                      batch['label'][b], ignore_index=ignore_index)
            if scd:
                for phase in ('t1', 't2'):
                    counts = confusion_update(counts, getattr(pred, f"semantic_{phase}")[b],
                                              batch[f"sem_{phase}"][b], semantic=True,
                                              ignore_index=ignore_index)
            total = merge_counts(total, counts)
    report = MetricReport.from_counts(total, scd=scd, exclude_no_change=exclude_no_change)
    return report, total


def fps_benchmark(model, resolution, n_images, window=None, stride=None, warmup=None, device='cpu'):
    """Images per second of sliding-window prediction on random square pairs at batch size 1."""
    if warmup is None:
        warmup = settings.BAN_FPS_WARMUP
    if n_images < 1:
        raise ConfigurationError(f"benchmark needs at least one image, got {n_images}")
    window = window or resolution
    stride = stride or window
    generator = torch.Generator().manual_seed(0)
    x1 = torch.randn(1, 3, resolution, resolution, generator=generator).to(device)
    x2 = torch.randn(1, 3, resolution, resolution, generator=generator).to(device)
    for _ in range(warmup):
        predict(model, x1, x2, window, stride)
    _synchronize(device)
    start = time.perf_counter()
    for _ in range(n_images):
        predict(model, x1, x2, window, stride)
    _synchronize(device)
    seconds = time.perf_counter() - start
    result = BenchResult(fps=n_images / seconds, seconds=seconds, n_images=n_images,
                         resolution=resolution, aris_target=getattr(model, 'aris_target', 0))
    logger.info(f"{result.fps:.2f} img/s over {n_images} images of {resolution}x{resolution} "
                f"(ARIS {result.aris_target})")
    return result


def _synchronize(device):
    if str(device).startswith('cuda'):
        torch.cuda.synchronize()
