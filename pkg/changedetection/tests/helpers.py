"""Toy builders and brute-force oracles shared by the test modules."""
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from changedetection.ban import BanModel
from changedetection.bitab import StackedBlocksBiTab
from changedetection.config import HEAD_BINARY, HEAD_SCD, BiTabSpec, BridgingConfig, TapSet, ViTConfig
from changedetection.encoder import build_encoder
from changedetection.serializers import RunConfigSerializer

TOY_VIT = ViTConfig.from_preset('toy')


def toy_spec(channels=(8, 16, 16, 32), strides=(4, 2, 2, 2), head_channels=8, num_semantic_classes=0):
    return BiTabSpec(stage_channels=channels, stage_strides=strides, head_channels=head_channels,
                     head_kind=HEAD_SCD if num_semantic_classes else HEAD_BINARY,
                     num_semantic_classes=num_semantic_classes)


def toy_model(seed=0, vit=TOY_VIT, spec=None, bridging=None, taps=None, aris_target=None):
    """Frozen random toy encoder + small Bi-TAB + one bridge per stage, all in eval mode."""
    torch.manual_seed(seed)
    spec = spec or toy_spec()
    encoder = build_encoder(vit, seed=seed)
    taps = taps or TapSet.evenly_spaced(vit.depth, spec.num_stages)
    model = BanModel(encoder, StackedBlocksBiTab(spec), taps, bridging or BridgingConfig(),
                     aris_target=aris_target)
    return model.eval()


def toy_run(work_dir='', **sections):
    """RunConfig for the toy encoder on synthetic squares; ``sections`` override whole sections."""
    raw = {
        'name': 'toy-test',
        'seed': 0,
        'work_dir': str(work_dir),
        'encoder': {'preset': 'toy'},
        'bitab': {'preset': 'stacked-blocks-tiny'},
        'data': {'layout': 'synthetic', 'synthetic_samples': 8, 'synthetic_size': 64, 'batch_size': 8,
                 'augment': {'enabled': False}},
        'optim': {'base_lr': 1e-3},
        'schedule': {'max_iters': 20, 'eval_interval': 10, 'log_interval': 10},
        'aris': {'target': 64},
        'inference': {'window': 64, 'stride': 32},
    }
    raw.update(sections)
    return RunConfigSerializer(data=raw).build()


def random_pair(batch=2, size=64, seed=0, dtype=torch.float32):
    generator = torch.Generator().manual_seed(seed)
    x1 = torch.randn(batch, 3, size, size, generator=generator, dtype=dtype)
    x2 = torch.randn(batch, 3, size, size, generator=generator, dtype=dtype)
    return x1, x2


def brute_force_attention(x_cm, x_tilde, affinity='dot'):
    """Row-by-row softmax attention with explicit loops; inputs B x N x C."""
    batch, n_c, channels = x_cm.shape
    n_f = x_tilde.shape[1]
    out = torch.zeros_like(x_cm, dtype=torch.float64)
    rows = torch.zeros(batch, n_c, n_f, dtype=torch.float64)
    for b in range(batch):
        for i in range(n_c):
            q = x_cm[b, i].double()
            if affinity == 'cosine':
                q = q / max(q.norm().item(), 1e-12)
            scores = []
            for j in range(n_f):
                k = x_tilde[b, j].double()
                if affinity == 'cosine':
                    k = k / max(k.norm().item(), 1e-12)
                scores.append(float(torch.dot(q, k)) / math.sqrt(channels))
            peak = max(scores)
            weights = [math.exp(s - peak) for s in scores]
            total = sum(weights)
            for j in range(n_f):
                rows[b, i, j] = weights[j] / total
                out[b, i] += rows[b, i, j] * x_tilde[b, j].double()
    return out, rows


def bilinear_oracle(image, out_h, out_w):
    """Half-pixel-centre bilinear sampling, edge-clamped, one output pixel at a time."""
    in_h, in_w = image.shape
    out = torch.zeros(out_h, out_w, dtype=torch.float64)
    for y in range(out_h):
        for x in range(out_w):
            sy = max((y + 0.5) * in_h / out_h - 0.5, 0.0)
            sx = max((x + 0.5) * in_w / out_w - 0.5, 0.0)
            y0, x0 = min(int(math.floor(sy)), in_h - 1), min(int(math.floor(sx)), in_w - 1)
            y1, x1 = min(y0 + 1, in_h - 1), min(x0 + 1, in_w - 1)
            wy, wx = sy - y0, sx - x0
            out[y, x] = ((1 - wy) * (1 - wx) * image[y0, x0] + (1 - wy) * wx * image[y0, x1]
                         + wy * (1 - wx) * image[y1, x0] + wy * wx * image[y1, x1])
    return out


def conv_oracle(x, weight, stride=1, padding=0, bias=None):
    """Direct-summation 2-D convolution of one C x H x W map, in float64."""
    c_out, c_in, k_h, k_w = weight.shape
    x = torch.nn.functional.pad(x.double(), (padding, padding, padding, padding))
    out_h = (x.shape[1] - k_h) // stride + 1
    out_w = (x.shape[2] - k_w) // stride + 1
    out = torch.zeros(c_out, out_h, out_w, dtype=torch.float64)
    for o in range(c_out):
        for i in range(out_h):
            for j in range(out_w):
                total = 0.0 if bias is None else float(bias[o])
                for c in range(c_in):
                    for u in range(k_h):
                        for v in range(k_w):
                            total += float(weight[o, c, u, v]) * float(x[c, i * stride + u, j * stride + v])
                out[o, i, j] = total
    return out


def conv_norm_relu_oracle(x, conv, norm):
    """Conv, eval-mode batch norm from running statistics, ReLU."""
    y = conv_oracle(x, conv.weight.detach(), conv.stride[0], conv.padding[0],
                    None if conv.bias is None else conv.bias.detach())
    for c in range(y.shape[0]):
        scale = float(norm.weight[c]) / math.sqrt(float(norm.running_var[c]) + norm.eps)
        y[c] = (y[c] - float(norm.running_mean[c])) * scale + float(norm.bias[c])
    return y.clamp(min=0)


def stage_block_oracle(x, block):
    shortcut = conv_oracle(x, block.shortcut.weight.detach(), block.shortcut.stride[0])
    inner = conv_norm_relu_oracle(x, block.conv1.conv, block.conv1.norm)
    return shortcut + conv_norm_relu_oracle(inner, block.conv2.conv, block.conv2.norm)


def _resize_oracle(x, size):
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return torch.stack([bilinear_oracle(x[c], *size) for c in range(x.shape[0])])


def fusion_head_oracle(head, maps, out_size):
    """Per-stage 1x1 projection, upsampling to the largest map, fuse, classify, resize; maps are C x H x W."""
    size = max((tuple(m.shape[-2:]) for m in maps), key=lambda s: s[0] * s[1])
    projected = [_resize_oracle(conv_oracle(m, proj.weight.detach(), bias=proj.bias.detach()), size)
                 for proj, m in zip(head.projections, maps)]
    fused = conv_norm_relu_oracle(torch.cat(projected), head.fuse.conv, head.fuse.norm)
    logits = conv_oracle(fused, head.classifier.weight.detach(), bias=head.classifier.bias.detach())
    return _resize_oracle(logits, out_size)


def randomize_affine(module, seed=0):
    """Random batch-norm statistics and affines plus random conv biases, so eval mode is not an identity."""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.BatchNorm2d):
                n = m.num_features
                m.running_mean.copy_(torch.randn(n, generator=generator))
                m.running_var.copy_(torch.rand(n, generator=generator) + 0.5)
                m.weight.copy_(torch.randn(n, generator=generator))
                m.bias.copy_(torch.randn(n, generator=generator))
            elif isinstance(m, nn.Conv2d) and m.bias is not None:
                m.bias.copy_(torch.randn(m.bias.shape, generator=generator))
    return module


def brute_force_counts(pred, label, ignore_index=255):
    tp = fp = fn = tn = 0
    for p, t in zip(np.asarray(pred).ravel().tolist(), np.asarray(label).ravel().tolist()):
        if t == ignore_index:
            continue
        if p == 1 and t == 1:
            tp += 1
        elif p == 1:
            fp += 1
        elif t == 1:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def brute_force_confusion(pred, label, num_classes):
    matrix = [[0] * num_classes for _ in range(num_classes)]
    for p, t in zip(np.asarray(pred).ravel().tolist(), np.asarray(label).ravel().tolist()):
        matrix[t][p] += 1
    return matrix


def brute_force_kappa(matrix):
    total = sum(sum(row) for row in matrix)
    k = len(matrix)
    p_o = sum(matrix[i][i] for i in range(k)) / total
    p_e = sum(sum(matrix[i]) * sum(matrix[r][i] for r in range(k)) for i in range(k)) / total ** 2
    return 0.0 if p_e == 1 else (p_o - p_e) / (1 - p_e)


def finite_difference(loss_fn, param, index, step=1e-3):
    """Central difference of a scalar loss with respect to one parameter entry."""
    with torch.no_grad():
        original = param[index].item()
        param[index] = original + step
        plus = loss_fn().item()
        param[index] = original - step
        minus = loss_fn().item()
        param[index] = original
    return (plus - minus) / (2 * step)


def write_png(path, array, mode=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8), mode=mode).save(path)
    return path


def make_dataset_tree(root, names, size=16, folders=('t1', 't2', 'label'), seed=0):
    """Random images and 0/1 masks with the given filenames in each folder."""
    rng = np.random.default_rng(seed)
    root = Path(root)
    for name in names:
        for folder in folders:
            if folder in ('label', 'sem_t1', 'sem_t2'):
                write_png(root / folder / name, rng.integers(0, 2, size=(size, size)), mode='L')
            else:
                write_png(root / folder / name, rng.integers(0, 256, size=(size, size, 3)), mode='RGB')
    return root


def clip_style_state(encoder):
    """The toy encoder's weights laid out the way an OpenCLIP visual tower names them."""
    s = {k: v.clone() for k, v in encoder.state_dict().items()}
    state = {
        'visual.conv1.weight': s['patch_embed.weight'],
        'visual.class_embedding': s['class_token'],
        'visual.positional_embedding': s['pos_embed'],
        'visual.ln_pre.weight': s['ln_pre.weight'],
        'visual.ln_pre.bias': s['ln_pre.bias'],
        'visual.ln_post.weight': torch.ones(encoder.cfg.embed_dim),
        'visual.proj': torch.zeros(encoder.cfg.embed_dim, 16),
        'token_embedding.weight': torch.zeros(10, 16),
    }
    for i in range(encoder.cfg.depth):
        src, dst = f"visual.transformer.resblocks.{i}.", f"blocks.{i}."
        state[src + 'attn.in_proj_weight'] = torch.cat([s[f"{dst}attn.{n}.weight"] for n in 'qkv'])
        state[src + 'attn.in_proj_bias'] = torch.cat([s[f"{dst}attn.{n}.bias"] for n in 'qkv'])
        for old, new in (('attn.out_proj', 'attn.o'), ('ln_1', 'ln1'), ('ln_2', 'ln2'),
                         ('mlp.c_fc', 'ffn.fc1'), ('mlp.c_proj', 'ffn.fc2')):
            for suffix in ('weight', 'bias'):
                state[f"{src}{old}.{suffix}"] = s[f"{dst}{new}.{suffix}"]
    return state
