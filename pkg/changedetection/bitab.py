"""Bi-temporal adapter branch (Bi-TAB).

Any change detector that splits into a stem, a ladder of stages and a head fits the
``pre / stage(j) / head`` interface below. The concrete model here is a lightweight
stacked-blocks design: a strided stem, then per stage two conv-norm-ReLU blocks (the
stride on the first) plus a strided 1x1 projection shortcut. Its head fuses per-stage
absolute differences of the two phases.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import BiTabSpec
from .exceptions import ShapeError

logger = logging.getLogger(__name__)


@dataclass
class StageFeature:
    map: torch.Tensor  # B x C_c x H_c x W_c
    stage_index: int

    @property
    def channels(self):
        return self.map.shape[1]

    @property
    def grid(self):
        return tuple(self.map.shape[-2:])


@dataclass
class ChangeLogits:
    change: torch.Tensor  # B x 2 x H x W
    semantic_t1: torch.Tensor | None = None  # B x K x H x W
    semantic_t2: torch.Tensor | None = None

    @property
    def is_scd(self):
        return self.semantic_t1 is not None


class ConvNormAct(nn.Sequential):
    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride, padding=kernel_size // 2, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )

    @property
    def conv(self):
        return self[0]

    @property
    def norm(self):
        return self[1]


class Stem(nn.Module):
    """Strided conv (kernel 2s-1) producing ceil(H/s) x ceil(W/s) features."""

    def __init__(self, in_channels, out_channels, stride):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=2 * stride - 1, stride=stride,
                              padding=stride - 1, bias=False)
        self.norm = nn.BatchNorm2d(out_channels)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class StageBlock(nn.Module):
    def __init__(self, in_channels, out_channels, stride):
        super().__init__()
        self.conv1 = ConvNormAct(in_channels, out_channels, 3, stride)
        self.conv2 = ConvNormAct(out_channels, out_channels, 3, 1)
        self.shortcut = nn.Conv2d(in_channels, out_channels, kernel_size=1, stride=stride, bias=False)

    def forward(self, x):
        return self.shortcut(x) + self.conv2(self.conv1(x))


class FusionHead(nn.Module):
    """Projects each stage map to a common width, upsamples to the finest stage, fuses, classifies."""

    def __init__(self, stage_channels, head_channels, num_classes):
        super().__init__()
        self.projections = nn.ModuleList([nn.Conv2d(c, head_channels, kernel_size=1) for c in stage_channels])
        self.fuse = ConvNormAct(head_channels * len(stage_channels), head_channels, kernel_size=1)
        self.classifier = nn.Conv2d(head_channels, num_classes, kernel_size=1)

    def forward(self, maps, out_size):
        if len(maps) != len(self.projections):
            raise ShapeError(f"head built for {len(self.projections)} stages got {len(maps)} maps")
        size = max((m.shape[-2:] for m in maps), key=lambda s: s[0] * s[1])
        projected = [resize_map(proj(m), size) for proj, m in zip(self.projections, maps)]
        logits = self.classifier(self.fuse(torch.cat(projected, dim=1)))
        return resize_map(logits, out_size)


def resize_map(x, size):
    size = tuple(size)
    if tuple(x.shape[-2:]) == size:
        return x
    return F.interpolate(x, size=size, mode='bilinear', align_corners=False)


class StackedBlocksBiTab(nn.Module):
    def __init__(self, spec: BiTabSpec):
        super().__init__()
        self.spec = spec
        channels, strides = spec.stage_channels, spec.stage_strides
        self.stem = Stem(spec.in_channels, channels[0], strides[0])
        self.stages = nn.ModuleList()
        for j, out_channels in enumerate(channels):
            in_channels = channels[max(j - 1, 0)]
            # the stem already applied the first stride
            self.stages.append(StageBlock(in_channels, out_channels, 1 if j == 0 else strides[j]))
        self.change_head = FusionHead(channels, spec.head_channels, 2)
        if spec.is_scd:
            self.semantic_heads = nn.ModuleList([
                FusionHead(channels, spec.head_channels, spec.num_semantic_classes) for _ in range(2)
            ])
        else:
            self.semantic_heads = None
        self.reset_parameters()

    def reset_parameters(self):
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.kaiming_normal_(module.weight, mode='fan_out', nonlinearity='relu')
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.BatchNorm2d):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
        return self

    @property
    def num_stages(self):
        return len(self.stages)

    def head_modules(self):
        heads = [self.change_head]
        if self.semantic_heads is not None:
            heads.extend(self.semantic_heads)
        return heads

    def head_parameters(self):
        for head in self.head_modules():
            yield from head.parameters()

    def backbone_parameters(self):
        yield from self.stem.parameters()
        yield from self.stages.parameters()

    def pre(self, image):
        if image.dim() != 4 or image.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"Bi-TAB expects B x {self.spec.in_channels} x H x W images, got {tuple(image.shape)}"
            )
        return StageFeature(self.stem(image), 0)

    def stage(self, x: StageFeature, j):
        """Run stage j (1-based) on the output of stage j - 1."""
        if not 1 <= j <= self.num_stages:
            raise ShapeError(f"stage index {j} outside 1..{self.num_stages}")
        if x.stage_index != j - 1:
            raise ShapeError(f"stage {j} expects the output of stage {j - 1}, got stage {x.stage_index}")
        return StageFeature(self.stages[j - 1](x.map), j)

    def backbone(self, image):
        x = self.pre(image)
        features = []
        for j in range(1, self.num_stages + 1):
            x = self.stage(x, j)
            features.append(x)
        return features

    def head(self, f1, f2, out_size):
        logits = change_head(f1, f2, self, out_size)
        if self.semantic_heads is None:
            return logits
        return scd_heads(f1, f2, self, out_size, change=logits.change)

    def forward(self, x1, x2):
        """Plain Bi-TAB prediction without any injected encoder features."""
        out_size = x1.shape[-2:]
        return self.head(self.backbone(x1), self.backbone(x2), out_size)


def bitab_pre(image, bitab: StackedBlocksBiTab):
    return bitab.pre(image)


def bitab_stage(x: StageFeature, j, bitab: StackedBlocksBiTab):
    return bitab.stage(x, j)


def _check_siamese(f1, f2):
    if len(f1) != len(f2):
        raise ShapeError(f"phase feature lists differ in length: {len(f1)} vs {len(f2)}")
    for a, b in zip(f1, f2):
        if a.map.shape != b.map.shape:
            raise ShapeError(f"stage {a.stage_index} shapes differ: {tuple(a.map.shape)} vs {tuple(b.map.shape)}")


def change_head(f1, f2, bitab: StackedBlocksBiTab, out_size):
    """Binary change logits from per-stage |f1 - f2|; symmetric in the two phases."""
    _check_siamese(f1, f2)
    diffs = [torch.abs(a.map - b.map) for a, b in zip(f1, f2)]
    return ChangeLogits(bitab.change_head(diffs, out_size))


def scd_heads(f1, f2, bitab: StackedBlocksBiTab, out_size, change=None):
    """Change logits plus one segmentation head per phase, each fed only its own phase."""
    if bitab.semantic_heads is None:
        raise ShapeError("this Bi-TAB was built without semantic heads (head_kind is not 'scd')")
    if change is None:
        change = change_head(f1, f2, bitab, out_size).change
    seg1 = bitab.semantic_heads[0]([f.map for f in f1], out_size)
    seg2 = bitab.semantic_heads[1]([f.map for f in f2], out_size)
    return ChangeLogits(change, seg1, seg2)
