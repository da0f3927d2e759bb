"""Confusion accumulation and the BCD / SCD metric suite.

Counts are a mergeable monoid: workers tally privately with ``confusion_update`` and
combine with ``merge_counts``. Metrics are stored as fractions and rendered as
percentages with two decimals.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .exceptions import DataError, ShapeError

logger = logging.getLogger(__name__)

SEK_IOU_WEIGHT = 0.7
SCORE_SEK_WEIGHT = 0.7
SCORE_MIOU_WEIGHT = 0.3


def _as_array(x):
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x).astype(np.int64, copy=False)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    seg_confusion: np.ndarray | None = field(default=None, compare=False)
    degenerate_images: int = 0

    @classmethod
    def empty(cls, num_classes=0):
        seg = np.zeros((num_classes, num_classes), dtype=np.int64) if num_classes else None
        return cls(seg_confusion=seg)

    @property
    def pixel_total(self):
        return self.tp + self.fp + self.fn + self.tn

    @property
    def num_classes(self):
        return 0 if self.seg_confusion is None else self.seg_confusion.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ConfusionCounts):
            return NotImplemented
        same_seg = (self.seg_confusion is None and other.seg_confusion is None) or (
            self.seg_confusion is not None and other.seg_confusion is not None
            and np.array_equal(self.seg_confusion, other.seg_confusion))
        return (self.tp, self.fp, self.fn, self.tn, self.degenerate_images) == \
            (other.tp, other.fp, other.fn, other.tn, other.degenerate_images) and same_seg


def binary_counts(pred, label, ignore_index=255):
    """Per-pixel tally of one change map against its label."""
    pred, label = _as_array(pred), _as_array(label)
    if pred.shape != label.shape:
        raise ShapeError(f"prediction {pred.shape} and label {label.shape} differ in shape")
    valid = label != ignore_index
    p = (pred == 1) & valid
    t = (label == 1) & valid
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t & valid))
    tn = int(np.count_nonzero(~p & ~t & valid))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn, degenerate_images=int(tp + fp + fn == 0))


def semantic_confusion(pred, label, num_classes, ignore_index=255):
    """K x K matrix, rows = label class, columns = predicted class."""
    pred, label = _as_array(pred), _as_array(label)
    if pred.shape != label.shape:
        raise ShapeError(f"prediction {pred.shape} and label {label.shape} differ in shape")
    valid = (label != ignore_index) & (label >= 0) & (label < num_classes)
    if np.any((pred[valid] < 0) | (pred[valid] >= num_classes)):
        raise DataError(f"predicted class outside [0, {num_classes})")
    index = num_classes * label[valid] + pred[valid]
    return np.bincount(index, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def confusion_update(counts: ConfusionCounts, pred, label, semantic=False, ignore_index=255):
    """Tally one prediction into ``counts`` and return the merged counts.

    The binary path takes change maps; ``semantic=True`` takes K-class maps of one phase
    and adds into the bi-temporal segmentation confusion.
    """
    if semantic:
        if counts.num_classes == 0:
            raise ShapeError("counts were created without a segmentation confusion matrix")
        seg = semantic_confusion(pred, label, counts.num_classes, ignore_index)
        return replace(counts, seg_confusion=counts.seg_confusion + seg)
    return merge_counts(counts, replace(binary_counts(pred, label, ignore_index),
                                        seg_confusion=None))


def merge_counts(a: ConfusionCounts, b: ConfusionCounts):
    if a.seg_confusion is not None and b.seg_confusion is not None:
        if a.seg_confusion.shape != b.seg_confusion.shape:
            raise ShapeError(f"cannot merge {a.num_classes}-class and {b.num_classes}-class counts")
        seg = a.seg_confusion + b.seg_confusion
    else:
        seg = a.seg_confusion if a.seg_confusion is not None else b.seg_confusion
        seg = None if seg is None else seg.copy()
    return ConfusionCounts(
        tp=a.tp + b.tp, fp=a.fp + b.fp, fn=a.fn + b.fn, tn=a.tn + b.tn,
        seg_confusion=seg, degenerate_images=a.degenerate_images + b.degenerate_images,
    )


class BcdMetrics(NamedTuple):
    iou_c: float
    f1_c: float
    precision_c: float
    recall_c: float
    oa: float


class ScdMetrics(NamedTuple):
    miou: float
    kappa: float
    sek: float
    score: float


def f1_from_precision_recall(precision, recall):
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def iou_from_f1(f1):
    return f1 / (2 - f1)


def _ratio(numerator, denominator, empty):
    return numerator / denominator if denominator else empty


def bcd_metrics(counts: ConfusionCounts) -> BcdMetrics:
    """IoU, F1, precision and recall on the change class, and overall accuracy."""
    if counts.pixel_total == 0:
        raise DataError("no pixels were counted")
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    if tp + fp + fn == 0:
        logger.warning(f"no change in labels or predictions ({counts.degenerate_images} images); "
                       f"IoU and F1 of the change class are reported as 1.0")
    iou = _ratio(tp, tp + fp + fn, 1.0)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn, 1.0)
    precision = _ratio(tp, tp + fp, 1.0 if fn == 0 else 0.0)
    recall = _ratio(tp, tp + fn, 1.0 if fp == 0 else 0.0)
    oa = (tp + tn) / counts.pixel_total
    return BcdMetrics(iou, f1, precision, recall, oa)


def unchanged_iou(counts: ConfusionCounts):
    return _ratio(counts.tn, counts.tn + counts.fp + counts.fn, 1.0)


def kappa_coefficient(confusion, exclude_no_change=False):
    """(p_o - p_e) / (1 - p_e) over a label x prediction confusion matrix.

    ``exclude_no_change`` zeroes the (0, 0) cell first; the default keeps the raw matrix.
    """
    confusion = np.array(confusion, dtype=np.float64)
    if exclude_no_change:
        confusion[0, 0] = 0
    total = confusion.sum()
    if total == 0:
        raise DataError("segmentation confusion matrix is empty")
    p_o = np.trace(confusion) / total
    p_e = float(np.sum(confusion.sum(axis=0) * confusion.sum(axis=1))) / (total * total)
    if math.isclose(p_e, 1.0, rel_tol=0.0, abs_tol=1e-12):
        logger.warning("expected agreement is 1 (single-class data); kappa reported as 0")
        return 0.0
    return float((p_o - p_e) / (1 - p_e))


def scd_metrics(counts: ConfusionCounts, exclude_no_change=False) -> ScdMetrics:
    """mIoU, kappa, Sek = exp(IoU_c - 1) * kappa, Score = 0.7 Sek + 0.3 mIoU."""
    if counts.seg_confusion is None:
        raise DataError("SCD metrics need a segmentation confusion matrix")
    iou_c = bcd_metrics(counts).iou_c
    miou = (unchanged_iou(counts) + iou_c) / 2
    kappa = kappa_coefficient(counts.seg_confusion, exclude_no_change)
    sek = math.exp(iou_c - 1) * kappa
    return ScdMetrics(miou, kappa, sek, score_from(sek, miou))


def score_from(sek, miou):
    return SCORE_SEK_WEIGHT * sek + SCORE_MIOU_WEIGHT * miou


@dataclass
class MetricReport:
    iou_c: float
    f1_c: float
    precision_c: float
    recall_c: float
    oa: float
    iou_u: float
    miou: float
    kappa: float | None = None
    sek: float | None = None
    score: float | None = None
    degenerate_images: int = 0
    pixel_total: int = 0

    @classmethod
    def from_counts(cls, counts: ConfusionCounts, scd=False, exclude_no_change=False):
        bcd = bcd_metrics(counts)
        iou_u = unchanged_iou(counts)
        report = cls(**bcd._asdict(), iou_u=iou_u, miou=(iou_u + bcd.iou_c) / 2,
                     degenerate_images=counts.degenerate_images, pixel_total=counts.pixel_total)
        if scd:
            scd_values = scd_metrics(counts, exclude_no_change)
            report.kappa, report.sek, report.score = scd_values.kappa, scd_values.sek, scd_values.score
        return report

    @property
    def is_scd(self):
        return self.score is not None

    @property
    def key_metric(self):
        """Model-selection metric: Score for SCD, F1 of the change class for BCD."""
        return self.score if self.is_scd else self.f1_c

    def as_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}

    def metric_items(self):
        return [(k, v) for k, v in self.as_dict().items() if k not in ('degenerate_images', 'pixel_total')]

    def as_table(self):
        rows = [f"{name:<12} {value * 100:>7.2f}" for name, value in self.metric_items()]
        width = max(len(r) for r in rows)
        header = f"{'metric':<12} {'%':>7}"
        lines = [header, '-' * width, *rows]
        if self.degenerate_images:
            lines.append(f"({self.degenerate_images} images without any change in label or prediction)")
        return '\n'.join(lines)


def write_report(report: MetricReport, directory, stem='metrics'):
    """Write ``<stem>.json`` (name -> fraction) and ``<stem>.txt`` (percent table)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    json_path = directory / f"{stem}.json"
    json_path.write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True), encoding='utf-8')
    (directory / f"{stem}.txt").write_text(report.as_table() + '\n', encoding='utf-8')
    logger.info(f"Metric report written to {json_path}")
    return json_path
