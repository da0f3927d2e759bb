"""BAN assembly: frozen encoder + bridging modules + Bi-TAB.

Per temporal phase the forward pass interleaves the three parts: the encoder runs
the chunk of blocks up to tap j (no gradients), Bi-TAB stage j runs, then bridge j
injects the tapped tokens into the stage output before stage j + 1 consumes it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .bitab import ChangeLogits, StackedBlocksBiTab
from .bridging import BridgingModule, bridge_param_count
from .config import BridgingConfig, RunConfig, TapSet
from .encoder import FoundationEncoder, aris_resize, build_encoder
from .exceptions import ConfigurationError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class ParamReport:
    learnable_count: int
    frozen_count: int
    breakdown: dict = field(default_factory=dict)
    bridge_counts: list = field(default_factory=list)

    @property
    def total(self):
        return self.learnable_count + self.frozen_count

    def as_rows(self):
        rows = [(name, count) for name, count in self.breakdown.items()]
        rows.append(('learnable', self.learnable_count))
        rows.append(('frozen', self.frozen_count))
        return rows


class BanModel(nn.Module):
    def __init__(self, encoder: FoundationEncoder, bitab: StackedBlocksBiTab, taps: TapSet,
                 bridging: BridgingConfig, aris_target=None):
        super().__init__()
        self.encoder = encoder
        self.bitab = bitab
        self.taps = taps
        self.aris_target = int(aris_target or encoder.cfg.pretrain_resolution)
        if bridging.enabled:
            taps.check_depth(encoder.cfg.depth)
            if len(taps) != bitab.num_stages:
                raise ConfigurationError(f"{len(taps)} encoder taps but {bitab.num_stages} Bi-TAB stages")
            self.bridges = nn.ModuleList([
                BridgingModule(encoder.cfg.embed_dim, channels, bridging.affinity).reset_parameters(
                    zero_init=bridging.zero_init, init_range=bridging.init_range)
                for channels in bitab.spec.stage_channels
            ])
        else:
            self.bridges = nn.ModuleList()
        self.trace_recorder = None
        self.encoder.freeze()

    @property
    def uses_encoder(self):
        return len(self.bridges) > 0

    def learnable_named_parameters(self):
        for name, param in self.named_parameters():
            if not name.startswith('encoder.') and param.requires_grad:
                yield name, param

    def phase_features(self, image, phase=1):
        """Stage features of one temporal phase with encoder features injected."""
        if not self.uses_encoder:
            return self.bitab.backbone(image)
        with torch.no_grad():
            seq, grid = self.encoder.embed(aris_resize(image, self.aris_target))
        x_cm = self.bitab.pre(image)
        features = []
        done = 0
        for j, (tap, bridge) in enumerate(zip(self.taps, self.bridges), start=1):
            with torch.no_grad():
                seq = self.encoder.run_blocks(seq, done, tap)
            done = tap
            x_fm = self.encoder.tap(seq, grid).detach()
            x_cm = self.bitab.stage(x_cm, j)
            if self.trace_recorder is not None:
                x_cm, trace = bridge(x_fm, x_cm, return_trace=True)
                self.trace_recorder(j, phase, trace)
            else:
                x_cm = bridge(x_fm, x_cm)
            features.append(x_cm)
        return features

    def forward(self, x1, x2):
        return ban_forward(self, x1, x2)


def ban_forward(model: BanModel, x1, x2) -> ChangeLogits:
    if x1.shape != x2.shape:
        raise ShapeError(f"phase images differ in shape: {tuple(x1.shape)} vs {tuple(x2.shape)}")
    if model.uses_encoder and len(model.taps) != model.bitab.num_stages:
        raise ConfigurationError(f"{len(model.taps)} taps but {model.bitab.num_stages} Bi-TAB stages")
    f1 = model.phase_features(x1, phase=1)
    f2 = model.phase_features(x2, phase=2)
    return model.bitab.head(f1, f2, x1.shape[-2:])


def count_params(model: BanModel) -> ParamReport:
    """Learnable = bridges + Bi-TAB, frozen = encoder; siamese weights are counted once."""
    def numel(params):
        return sum(p.numel() for p in params)

    bridges = [numel(b.parameters()) for b in model.bridges]
    breakdown = {
        'encoder': numel(model.encoder.parameters()),
        'bridges': sum(bridges),
        'bitab.backbone': numel(model.bitab.backbone_parameters()),
        'bitab.head': numel(model.bitab.head_parameters()),
    }
    learnable = breakdown['bridges'] + breakdown['bitab.backbone'] + breakdown['bitab.head']
    report = ParamReport(learnable_count=learnable, frozen_count=breakdown['encoder'],
                         breakdown=breakdown, bridge_counts=bridges)
    expected = [bridge_param_count(b.fm_channels, b.cm_channels) for b in model.bridges]
    if bridges != expected:
        logger.warning(f"bridge parameter counts {bridges} differ from the closed form {expected}")
    return report


def build_ban_model(run: RunConfig, encoder=None):
    """Assemble a model from a run-config; the encoder may be shared between models."""
    if encoder is None:
        encoder = build_encoder(run.encoder.vit, seed=run.encoder.init_seed, checkpoint=run.encoder.checkpoint)
    bitab = StackedBlocksBiTab(run.bitab)
    model = BanModel(encoder, bitab, run.taps, run.bridging, aris_target=run.aris_target)
    report = count_params(model)
    logger.info(f"BAN '{run.name}': {report.learnable_count / 1e6:.3f}M learnable, "
                f"{report.frozen_count / 1e6:.2f}M frozen parameters")
    return model
