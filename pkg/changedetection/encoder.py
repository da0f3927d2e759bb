"""Frozen siamese ViT encoder that yields a ladder of intermediate token features.

Checkpoint key schema (flat name -> float32 tensor, block index ``i`` is 0-based)::

    patch_embed.weight        D x C x P x P
    patch_embed.bias          D
    class_token               D                 (use_class_token only)
    pos_embed                 (1 + N) x D       (N x D without a class token), N = (res / P)^2
    ln_pre.weight, ln_pre.bias                  (pre_norm only)
    blocks.i.ln1.weight, blocks.i.ln1.bias
    blocks.i.attn.q.weight    D x D   (+ .bias)  heads are consecutive D/h row slices
    blocks.i.attn.k.weight    D x D   (+ .bias)
    blocks.i.attn.v.weight    D x D   (+ .bias)
    blocks.i.attn.o.weight    D x D   (+ .bias)
    blocks.i.ln2.weight, blocks.i.ln2.bias
    blocks.i.ffn.fc1.weight   hidden x D (+ .bias)
    blocks.i.ffn.fc2.weight   D x hidden (+ .bias)

No final encoder LayerNorm is part of the schema: taps are raw block outputs.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .config import TapSet, ViTConfig
from .exceptions import ConfigurationError, NumericError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class PatchTokens:
    """Token sequence with its 2-D grid; the class token, if any, is kept apart."""
    tokens: torch.Tensor  # B x N x D
    grid_h: int
    grid_w: int
    class_token: torch.Tensor | None = None  # B x D

    def __post_init__(self):
        if self.tokens.dim() != 3:
            raise ShapeError(f"tokens must be B x N x D, got shape {tuple(self.tokens.shape)}")
        if self.tokens.shape[1] != self.grid_h * self.grid_w:
            raise ShapeError(
                f"{self.tokens.shape[1]} tokens do not fill a {self.grid_h}x{self.grid_w} grid"
            )

    @property
    def dim(self):
        return self.tokens.shape[-1]

    @property
    def num_tokens(self):
        return self.tokens.shape[1]

    def to_map(self):
        """B x D x grid_h x grid_w view of the tokens."""
        return rearrange(self.tokens, 'b (h w) d -> b d h w', h=self.grid_h, w=self.grid_w)

    def detach(self):
        cls = self.class_token.detach() if self.class_token is not None else None
        return PatchTokens(self.tokens.detach(), self.grid_h, self.grid_w, cls)


def aris_resize(image, target):
    """Bilinearly resample a B x C x H x W (or C x H x W) raster to target x target.

    Returns the input untouched when it is already at the target size.
    """
    if target is None or int(target) < 1:
        raise ConfigurationError(f"ARIS target must be a positive size, got {target}")
    target = int(target)
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
    if image.shape[-2] < 1 or image.shape[-1] < 1:
        raise ShapeError(f"cannot resize an empty raster of shape {tuple(image.shape)}")
    if image.shape[-2:] == (target, target):
        out = image
    else:
        out = F.interpolate(image, size=(target, target), mode='bilinear', align_corners=False)
    return out.squeeze(0) if squeeze else out


def interpolate_pos_embed(pos, from_grid, to_grid, has_class_token=False):
    """Bilinear per-channel resampling of a positional table between token grids.

    ``pos`` is (cls + H*W) x D; the class-token row passes through unchanged.
    """
    from_h, from_w = from_grid
    to_h, to_w = to_grid
    offset = 1 if has_class_token else 0
    if pos.shape[0] != offset + from_h * from_w:
        raise ShapeError(
            f"positional table has {pos.shape[0]} rows, expected {offset + from_h * from_w} "
            f"for a {from_h}x{from_w} grid"
        )
    if (from_h, from_w) == (to_h, to_w):
        return pos
    cls_rows, grid_rows = pos[:offset], pos[offset:]
    grid = rearrange(grid_rows, '(h w) d -> 1 d h w', h=from_h, w=from_w)
    grid = F.interpolate(grid, size=(to_h, to_w), mode='bilinear', align_corners=False)
    return torch.cat([cls_rows, rearrange(grid, '1 d h w -> (h w) d')], dim=0)


class QuickGELU(nn.Module):
    def forward(self, x):
        return x * torch.sigmoid(1.702 * x)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        if dim % num_heads:
            raise ConfigurationError(f"dim {dim} is not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x, return_attention=False):
        q, k, v = (rearrange(proj(x), 'b n (h d) -> b h n d', h=self.num_heads)
                   for proj in (self.q, self.k, self.v))
        attn = torch.softmax(torch.matmul(q, k.transpose(-1, -2)) * self.scale, dim=-1)
        out = rearrange(torch.matmul(attn, v), 'b h n d -> b n (h d)')
        out = self.o(out)
        return (out, attn) if return_attention else out


class FeedForward(nn.Module):
    def __init__(self, dim, hidden_dim, activation='gelu'):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.act = QuickGELU() if activation == 'quick_gelu' else nn.GELU()
        self.fc2 = nn.Linear(hidden_dim, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm block: x' = MSA(LN(x)) + x, out = FFN(LN(x')) + x'."""

    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.embed_dim)
        self.attn = MultiHeadSelfAttention(cfg.embed_dim, cfg.num_heads)
        self.ln2 = nn.LayerNorm(cfg.embed_dim)
        self.ffn = FeedForward(cfg.embed_dim, cfg.hidden_dim, cfg.activation)

    def forward(self, x, return_attention=False):
        attended = self.attn(self.ln1(x), return_attention=return_attention)
        if return_attention:
            attended, attn = attended
        x = attended + x
        x = self.ffn(self.ln2(x)) + x
        return (x, attn) if return_attention else x


def transformer_block(x: PatchTokens, block: TransformerBlock, index=None):
    """Apply one block to a token set, re-attaching the class token for the attention."""
    if x.dim != block.ln1.normalized_shape[0]:
        raise ShapeError(f"block expects {block.ln1.normalized_shape[0]}-dim tokens, got {x.dim}")
    seq = x.tokens if x.class_token is None else torch.cat([x.class_token.unsqueeze(1), x.tokens], dim=1)
    out = block(seq)
    _check_finite(out, index)
    if x.class_token is None:
        return PatchTokens(out, x.grid_h, x.grid_w)
    return PatchTokens(out[:, 1:], x.grid_h, x.grid_w, out[:, 0])


def _check_finite(x, index):
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite activation after encoder block {index}", block_index=index)


class FoundationEncoder(nn.Module):
    """ViT image encoder used as a frozen, shared-parameter feature source for both phases."""

    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        grid = cfg.pretrain_grid
        self.patch_embed = nn.Conv2d(cfg.in_channels, cfg.embed_dim, kernel_size=cfg.patch_size,
                                     stride=cfg.patch_size)
        if cfg.use_class_token:
            self.class_token = nn.Parameter(torch.zeros(cfg.embed_dim))
        else:
            self.register_parameter('class_token', None)
        self.pos_embed = nn.Parameter(torch.zeros((1 if cfg.use_class_token else 0) + grid * grid, cfg.embed_dim))
        self.ln_pre = nn.LayerNorm(cfg.embed_dim) if cfg.pre_norm else None
        self.blocks = nn.ModuleList([TransformerBlock(cfg) for _ in range(cfg.depth)])
        self.frozen = False

    def reset_parameters(self, seed=0):
        """Random toy weights; real runs load a checkpoint instead."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    nn.init.trunc_normal_(module.weight, std=0.02)
                    nn.init.zeros_(module.bias)
                elif isinstance(module, nn.LayerNorm):
                    nn.init.ones_(module.weight)
                    nn.init.zeros_(module.bias)
            nn.init.trunc_normal_(self.patch_embed.weight, std=0.02)
            nn.init.zeros_(self.patch_embed.bias)
            nn.init.trunc_normal_(self.pos_embed, std=0.02)
            if self.class_token is not None:
                nn.init.trunc_normal_(self.class_token, std=0.02)
        return self

    def freeze(self):
        for param in self.parameters():
            param.requires_grad_(False)
        self.frozen = True
        return super().train(False)

    def train(self, mode=True):
        # A frozen encoder never leaves inference mode.
        return super().train(False if self.frozen else mode)

    def patchify(self, image):
        """B x C x S x S raster -> PatchTokens with N = S^2 / P^2 (no class token, no positions)."""
        p = self.cfg.patch_size
        h, w = image.shape[-2:]
        if h % p or w % p:
            raise ShapeError(f"image side {h}x{w} is not divisible by patch size {p}")
        x = self.patch_embed(image)
        return PatchTokens(rearrange(x, 'b d h w -> b (h w) d'), h // p, w // p)

    def position_table(self, grid_h, grid_w):
        grid = self.cfg.pretrain_grid
        return interpolate_pos_embed(self.pos_embed, (grid, grid), (grid_h, grid_w),
                                     has_class_token=self.cfg.use_class_token)

    def embed(self, image):
        """Patch embedding, class token and positions; returns the B x T x D sequence and its grid."""
        tokens = self.patchify(image)
        seq = tokens.tokens
        if self.class_token is not None:
            cls = self.class_token.expand(seq.shape[0], 1, -1)
            seq = torch.cat([cls, seq], dim=1)
        seq = seq + self.position_table(tokens.grid_h, tokens.grid_w).unsqueeze(0)
        if self.ln_pre is not None:
            seq = self.ln_pre(seq)
        return seq, (tokens.grid_h, tokens.grid_w)

    def run_blocks(self, seq, start, stop):
        """Run blocks with 1-based indices start+1 .. stop."""
        for index in range(start, stop):
            seq = self.blocks[index](seq)
            _check_finite(seq, index + 1)
        return seq

    def tap(self, seq, grid):
        """Strip the class token and package a block output as PatchTokens."""
        if self.class_token is not None:
            return PatchTokens(seq[:, 1:], grid[0], grid[1], seq[:, 0])
        return PatchTokens(seq, grid[0], grid[1])

    def forward(self, image, taps: TapSet):
        return encoder_forward(self, image, taps)

    def checksum(self):
        """SHA-256 over every parameter, keys in sorted order."""
        digest = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            digest.update(name.encode('utf-8'))
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


def encoder_forward(encoder: FoundationEncoder, image, taps: TapSet):
    """Block outputs at each tap, class token stripped; never records gradients."""
    taps.check_depth(encoder.cfg.depth)
    outputs = []
    with torch.no_grad():
        seq, grid = encoder.embed(image)
        done = 0
        for index in taps:
            seq = encoder.run_blocks(seq, done, index)
            done = index
            outputs.append(encoder.tap(seq, grid))
    return outputs


def build_encoder(cfg: ViTConfig, seed=0, checkpoint=None):
    """Construct a frozen encoder with random toy weights or weights from a checkpoint."""
    encoder = FoundationEncoder(cfg).reset_parameters(seed)
    if checkpoint:
        from .checkpoints import load_encoder_weights
        load_encoder_weights(encoder, checkpoint)
    encoder.freeze()
    params = sum(p.numel() for p in encoder.parameters())
    logger.info(f"Foundation encoder ready: {cfg.depth} blocks, dim {cfg.embed_dim}, "
                f"{params / 1e6:.2f}M frozen parameters")
    return encoder
