import logging

import torch
import torch.nn.functional as F

from .bitab import ChangeLogits
from .exceptions import DataError, ShapeError

logger = logging.getLogger(__name__)


def pixel_cross_entropy(logits, labels, ignore_index=255):
    """Mean over labelled pixels of -log softmax(logits)[label]; logits B x C x H x W, labels B x H x W."""
    if logits.dim() != 4 or labels.dim() != 3:
        raise ShapeError(f"expected B x C x H x W logits and B x H x W labels, got "
                         f"{tuple(logits.shape)} and {tuple(labels.shape)}")
    if logits.shape[0] != labels.shape[0] or logits.shape[-2:] != labels.shape[-2:]:
        raise ShapeError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} differ in size")
    labels = labels.long()
    num_classes = logits.shape[1]
    bad = (labels != ignore_index) & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        b, y, x = (int(v) for v in bad.nonzero()[0])
        raise DataError(f"label {int(labels[b, y, x])} at pixel (row {y}, col {x}) of sample {b} "
                        f"is outside [0, {num_classes})")
    return F.cross_entropy(logits, labels, ignore_index=ignore_index)


def cross_entropy_loss(logits: ChangeLogits, labels, semantic_labels=None, ignore_index=255):
    """Change loss, plus the two per-phase segmentation losses with unit weights for SCD."""
    loss = pixel_cross_entropy(logits.change, labels, ignore_index)
    if logits.is_scd:
        if semantic_labels is None:
            raise DataError("SCD logits need semantic labels for both phases")
        sem1, sem2 = semantic_labels
        loss = loss + pixel_cross_entropy(logits.semantic_t1, sem1, ignore_index) \
            + pixel_cross_entropy(logits.semantic_t2, sem2, ignore_index)
    return loss
