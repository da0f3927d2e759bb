"""Bridging modules: select, align and inject frozen encoder features into Bi-TAB stages.

For encoder tokens x_fm (N_f x C_f on an H_f x W_f grid) and a Bi-TAB stage feature
x_cm (C_c x H_c x W_c) a bridge computes::

    x~  = Linear(LN(x_fm))                             N_f x C_c
    A~  = softmax_rows(x_cm . x~^T / sqrt(C_c))         N_c x N_f
    x_cf = A~ . x~                                      N_c x C_c
    x_bm = x_cf + Resize(x~) + x_cm                     C_c x H_c x W_c

The attention is dense, so memory grows as O(N_c * N_f).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .bitab import StageFeature
from .encoder import PatchTokens
from .exceptions import ConfigurationError, ShapeError

logger = logging.getLogger(__name__)

AFFINITIES = ('dot', 'cosine')


@dataclass
class BridgeTrace:
    """Intermediate tensors of one bridge call, kept for debugging dumps."""
    x_fm: torch.Tensor
    x_tilde_fm: torch.Tensor
    affinity: torch.Tensor
    attn: torch.Tensor
    x_cf: torch.Tensor
    x_bm: torch.Tensor
    fm_grid: tuple
    cm_grid: tuple

    def as_tensors(self):
        return {
            'x_fm': self.x_fm, 'x_tilde_fm': self.x_tilde_fm, 'affinity': self.affinity,
            'attn': self.attn, 'x_cf': self.x_cf, 'x_bm': self.x_bm,
        }


def project_and_normalize(tokens, ln: nn.LayerNorm, proj: nn.Linear):
    """Per-token LayerNorm over channels followed by the C_f -> C_c projection."""
    if tokens.shape[-1] != ln.normalized_shape[0]:
        raise ShapeError(f"bridge expects {ln.normalized_shape[0]}-channel tokens, got {tokens.shape[-1]}")
    return proj(ln(tokens))


def cross_resample(x_cm, x_tilde_fm, affinity='dot'):
    """Resample projected encoder tokens onto the Bi-TAB query positions.

    x_cm: B x N_c x C_c, x_tilde_fm: B x N_f x C_c. Returns (x_cf, logits, attn).
    """
    if x_cm.shape[-1] != x_tilde_fm.shape[-1]:
        raise ShapeError(
            f"channel mismatch: Bi-TAB feature has {x_cm.shape[-1]}, projected tokens have {x_tilde_fm.shape[-1]}"
        )
    if x_tilde_fm.shape[1] == 0:
        raise ConfigurationError("cross-resampling needs at least one encoder token")
    if affinity not in AFFINITIES:
        raise ConfigurationError(f"unknown affinity '{affinity}'")
    queries, keys = x_cm, x_tilde_fm
    if affinity == 'cosine':
        queries = F.normalize(queries, dim=-1)
        keys = F.normalize(keys, dim=-1)
    logits = torch.matmul(queries, keys.transpose(-1, -2)) / math.sqrt(x_cm.shape[-1])
    attn = torch.softmax(logits, dim=-1)
    return torch.matmul(attn, x_tilde_fm), logits, attn


def resize_tokens(tokens, grid, size):
    """Reshape B x N x C tokens onto their grid and bilinearly resize to ``size``; returns B x C x H x W."""
    grid_h, grid_w = grid
    if tokens.shape[1] != grid_h * grid_w:
        raise ShapeError(f"{tokens.shape[1]} tokens cannot be laid out on a {grid_h}x{grid_w} grid")
    grid_map = rearrange(tokens, 'b (h w) c -> b c h w', h=grid_h, w=grid_w)
    if (grid_h, grid_w) == tuple(size):
        return grid_map
    return F.interpolate(grid_map, size=tuple(size), mode='bilinear', align_corners=False)


def fuse(x_cf, x_tilde_fm, fm_grid, x_cm):
    """x_bm = x_cf + Resize(x~) + x_cm on the Bi-TAB grid; x_cm is B x C_c x H_c x W_c."""
    h_c, w_c = x_cm.shape[-2:]
    if x_cf.shape[1] != h_c * w_c:
        raise ShapeError(f"{x_cf.shape[1]} resampled tokens for a {h_c}x{w_c} Bi-TAB grid")
    channels = {x_cf.shape[-1], x_tilde_fm.shape[-1], x_cm.shape[1]}
    if len(channels) != 1:
        raise ShapeError(f"fusion operands disagree on channel width: {sorted(channels)}")
    resampled = rearrange(x_cf, 'b (h w) c -> b c h w', h=h_c, w=w_c)
    return resampled + resize_tokens(x_tilde_fm, fm_grid, (h_c, w_c)) + x_cm


class BridgingModule(nn.Module):
    """One bridge per Bi-TAB stage, shared by both temporal phases."""

    def __init__(self, fm_channels, cm_channels, affinity='dot'):
        super().__init__()
        if affinity not in AFFINITIES:
            raise ConfigurationError(f"unknown affinity '{affinity}'")
        self.fm_channels = fm_channels
        self.cm_channels = cm_channels
        self.affinity = affinity
        self.ln = nn.LayerNorm(fm_channels)
        self.proj = nn.Linear(fm_channels, cm_channels)

    def reset_parameters(self, zero_init=False, init_range=0.02):
        nn.init.ones_(self.ln.weight)
        nn.init.zeros_(self.ln.bias)
        if zero_init:
            nn.init.zeros_(self.proj.weight)
        else:
            nn.init.uniform_(self.proj.weight, -init_range, init_range)
        nn.init.zeros_(self.proj.bias)
        return self

    def forward(self, x_fm: PatchTokens, x_cm: StageFeature, return_trace=False):
        return bridge_forward(x_fm, x_cm, self, return_trace=return_trace)


def bridge_forward(x_fm: PatchTokens, x_cm: StageFeature, bridge: BridgingModule, return_trace=False):
    """Project, resample and fuse; the result replaces the Bi-TAB stage feature."""
    x_tilde = project_and_normalize(x_fm.tokens, bridge.ln, bridge.proj)
    queries = rearrange(x_cm.map, 'b c h w -> b (h w) c')
    x_cf, logits, attn = cross_resample(queries, x_tilde, bridge.affinity)
    x_bm = fuse(x_cf, x_tilde, (x_fm.grid_h, x_fm.grid_w), x_cm.map)
    out = StageFeature(x_bm, x_cm.stage_index)
    if not return_trace:
        return out
    trace = BridgeTrace(
        x_fm=x_fm.tokens.detach(), x_tilde_fm=x_tilde.detach(), affinity=logits.detach(),
        attn=attn.detach(), x_cf=x_cf.detach(), x_bm=x_bm.detach(),
        fm_grid=(x_fm.grid_h, x_fm.grid_w), cm_grid=tuple(x_cm.map.shape[-2:]),
    )
    return out, trace


def bridge_param_count(fm_channels, cm_channels):
    """2 C_f (LayerNorm affine) + C_f C_c + C_c (linear)."""
    return 2 * fm_channels + fm_channels * cm_channels + cm_channels
