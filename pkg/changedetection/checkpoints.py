"""Checkpoint containers.

All weights are stored as safetensors files: a JSON header of names, dtypes and shapes
followed by little-endian tensor data. Encoder files use the flat key schema documented
in :mod:`changedetection.encoder`; model files hold the learnable bridges and Bi-TAB
(plus BatchNorm buffers) and reference the frozen encoder by path and checksum.
"""
from __future__ import annotations

import logging
import math
from pathlib import Path

import torch
from safetensors import safe_open
from safetensors.torch import load_file, save_file

from .encoder import FoundationEncoder, interpolate_pos_embed
from .exceptions import CheckpointError

logger = logging.getLogger(__name__)

MODEL_FORMAT = 'ban-model'
ENCODER_PREFIX = 'encoder.'


def _prepare(tensors):
    return {name: t.detach().cpu().contiguous().clone() for name, t in tensors.items()}


def read_tensors(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    if path.suffix == '.safetensors':
        try:
            return load_file(str(path), device='cpu')
        except Exception as e:
            raise CheckpointError(f"cannot read {path}: {e}") from e
    try:
        state = torch.load(path, map_location='cpu', weights_only=True)
    except Exception as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    if isinstance(state, dict) and 'state_dict' in state:
        state = state['state_dict']
    if not isinstance(state, dict):
        raise CheckpointError(f"{path} does not hold a name -> tensor mapping")
    return state


def read_metadata(path):
    path = Path(path)
    if path.suffix != '.safetensors':
        return {}
    with safe_open(str(path), framework='pt', device='cpu') as f:
        return dict(f.metadata() or {})


def write_tensors(tensors, path, metadata=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_file(_prepare(tensors), str(path), metadata={k: str(v) for k, v in (metadata or {}).items()})
    return path


def _fit_pos_embed(encoder: FoundationEncoder, pos):
    """Resample a square positional table saved at another pretrain resolution."""
    offset = 1 if encoder.cfg.use_class_token else 0
    side = int(math.isqrt(pos.shape[0] - offset))
    if side * side != pos.shape[0] - offset:
        raise CheckpointError(f"pos_embed with {pos.shape[0]} rows is not a square grid")
    grid = encoder.cfg.pretrain_grid
    logger.warning(f"Checkpoint positional table is {side}x{side}; resampling to {grid}x{grid}")
    return interpolate_pos_embed(pos, (side, side), (grid, grid), has_class_token=bool(offset))


def load_encoder_weights(encoder: FoundationEncoder, path, strict=True):
    """Copy a flat-schema state into ``encoder``. Missing keys fail, extra keys are logged."""
    state = {k[len(ENCODER_PREFIX):] if k.startswith(ENCODER_PREFIX) else k: v
             for k, v in read_tensors(path).items()}
    expected = encoder.state_dict()
    missing = sorted(set(expected) - set(state))
    if missing and strict:
        raise CheckpointError(f"{path} is missing {len(missing)} encoder keys: {', '.join(missing)}")
    extra = sorted(set(state) - set(expected))
    if extra:
        logger.warning(f"Ignoring {len(extra)} unknown keys in {path}: {', '.join(extra[:10])}"
                       f"{' ...' if len(extra) > 10 else ''}")
    tensors = {k: state[k] for k in expected if k in state}
    if 'pos_embed' in tensors and tensors['pos_embed'].shape != expected['pos_embed'].shape:
        tensors['pos_embed'] = _fit_pos_embed(encoder, tensors['pos_embed'])
    mismatched = [f"{k} {tuple(v.shape)} != {tuple(expected[k].shape)}"
                  for k, v in tensors.items() if v.shape != expected[k].shape]
    if mismatched:
        raise CheckpointError(f"shape mismatch in {path}: {'; '.join(mismatched)}")
    with torch.no_grad():
        for name, tensor in tensors.items():
            expected[name].copy_(tensor.to(expected[name].dtype))
    logger.info(f"Loaded {len(tensors)} encoder tensors from {path}")
    return encoder


def save_encoder_weights(encoder: FoundationEncoder, path):
    return write_tensors(encoder.state_dict(), path, metadata={'format': 'ban-encoder',
                                                               'checksum': encoder.checksum()})


def convert_clip_state_dict(state, prefix='visual.'):
    """Map an OpenCLIP / CLIP visual tower onto the flat encoder schema.

    Returns (tensors, dropped_keys). Fused ``in_proj`` attention weights are split into
    q, k and v; the post-norm and output projection have no place in the schema.
    """
    state = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)} if prefix else dict(state)
    if 'conv1.weight' not in state:
        raise CheckpointError(f"no '{prefix}conv1.weight' key; is this a CLIP visual tower?")
    out = {
        'patch_embed.weight': state.pop('conv1.weight'),
    }
    dim = out['patch_embed.weight'].shape[0]
    out['patch_embed.bias'] = state.pop('conv1.bias', torch.zeros(dim))
    if 'class_embedding' in state:
        out['class_token'] = state.pop('class_embedding')
    out['pos_embed'] = state.pop('positional_embedding')
    if 'ln_pre.weight' in state:
        out['ln_pre.weight'] = state.pop('ln_pre.weight')
        out['ln_pre.bias'] = state.pop('ln_pre.bias')

    block_ids = sorted({int(k.split('.')[2]) for k in state if k.startswith('transformer.resblocks.')})
    for i in block_ids:
        src = f"transformer.resblocks.{i}."
        dst = f"blocks.{i}."
        q, k, v = state.pop(src + 'attn.in_proj_weight').chunk(3, dim=0)
        qb, kb, vb = state.pop(src + 'attn.in_proj_bias').chunk(3, dim=0)
        for name, w, b in (('q', q, qb), ('k', k, kb), ('v', v, vb)):
            out[f"{dst}attn.{name}.weight"] = w.clone()
            out[f"{dst}attn.{name}.bias"] = b.clone()
        renames = {
            'attn.out_proj': 'attn.o', 'ln_1': 'ln1', 'ln_2': 'ln2',
            'mlp.c_fc': 'ffn.fc1', 'mlp.c_proj': 'ffn.fc2',
        }
        for old, new in renames.items():
            for suffix in ('weight', 'bias'):
                out[f"{dst}{new}.{suffix}"] = state.pop(f"{src}{old}.{suffix}")
    dropped = sorted(state)
    return out, dropped


def infer_vit_shape(tensors):
    """ViTConfig fields recoverable from a flat-schema state."""
    patch = tensors['patch_embed.weight']
    dim, patch_size = patch.shape[0], patch.shape[-1]
    depth = len({k.split('.')[1] for k in tensors if k.startswith('blocks.')})
    has_cls = 'class_token' in tensors
    grid = math.isqrt(tensors['pos_embed'].shape[0] - (1 if has_cls else 0))
    hidden = tensors['blocks.0.ffn.fc1.weight'].shape[0]
    return dict(patch_size=patch_size, embed_dim=dim, depth=depth, ffn_ratio=hidden / dim,
                pretrain_resolution=grid * patch_size, use_class_token=has_cls,
                pre_norm='ln_pre.weight' in tensors)


def learnable_state(model):
    return {k: v for k, v in model.state_dict().items() if not k.startswith(ENCODER_PREFIX)}


def save_model_checkpoint(model, path, run=None, iteration=0, key_metric=None):
    """Bridges + Bi-TAB; the encoder is embedded only when it did not come from a file."""
    tensors = dict(learnable_state(model))
    encoder_path = run.encoder.checkpoint if run is not None else ''
    embedded = not encoder_path
    if embedded:
        tensors.update({ENCODER_PREFIX + k: v for k, v in model.encoder.state_dict().items()})
    metadata = {
        'format': MODEL_FORMAT,
        'iteration': iteration,
        'encoder_checksum': model.encoder.checksum(),
        'encoder_checkpoint': encoder_path,
        'encoder_embedded': str(embedded).lower(),
        'config_name': run.name if run is not None else '',
    }
    if key_metric is not None:
        metadata['key_metric'] = f"{key_metric:.6f}"
    write_tensors(tensors, path, metadata)
    logger.info(f"Saved model checkpoint to {path} (iteration {iteration})")
    return Path(path)


def load_model_checkpoint(model, path, check_encoder=True):
    """Restore learnable weights (and an embedded encoder); returns the file metadata."""
    tensors = read_tensors(path)
    metadata = read_metadata(path)
    if metadata and metadata.get('format') != MODEL_FORMAT:
        raise CheckpointError(f"{path} is not a model checkpoint (format={metadata.get('format')})")
    encoder_tensors = {k[len(ENCODER_PREFIX):]: v for k, v in tensors.items() if k.startswith(ENCODER_PREFIX)}
    if encoder_tensors:
        expected = model.encoder.state_dict()
        missing = sorted(set(expected) - set(encoder_tensors))
        if missing:
            raise CheckpointError(f"embedded encoder in {path} is missing: {', '.join(missing)}")
        with torch.no_grad():
            for name, tensor in encoder_tensors.items():
                expected[name].copy_(tensor)
    learnable = {k: v for k, v in tensors.items() if not k.startswith(ENCODER_PREFIX)}
    expected = learnable_state(model)
    missing = sorted(set(expected) - set(learnable))
    if missing:
        raise CheckpointError(f"{path} is missing {len(missing)} model keys: {', '.join(missing)}")
    extra = sorted(set(learnable) - set(expected))
    if extra:
        logger.warning(f"Ignoring {len(extra)} unknown keys in {path}: {', '.join(extra[:10])}")
    # encoder keys were restored above
    model.load_state_dict({k: learnable[k] for k in expected}, strict=False)
    recorded = metadata.get('encoder_checksum')
    if check_encoder and recorded and recorded != model.encoder.checksum():
        raise CheckpointError(f"{path} was trained against a different encoder "
                              f"(checksum {recorded[:12]}..., loaded {model.encoder.checksum()[:12]}...)")
    logger.info(f"Loaded model checkpoint {path} (iteration {metadata.get('iteration', '?')})")
    return metadata


def save_bridge_trace(records, path):
    """Bridge intermediates keyed ``stage<j>.phase<p>.<tensor>``."""
    tensors = {}
    for (stage, phase), trace in records.items():
        for name, tensor in trace.as_tensors().items():
            tensors[f"stage{stage}.phase{phase}.{name}"] = tensor
    return write_tensors(tensors, path, metadata={'format': 'ban-bridge-trace'})
