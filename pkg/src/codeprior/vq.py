"""Stage I: vector-quantized autoencoder with a learnable codebook.

Latent grids are ``(N, d, u, v)`` tensors; code grids are ``(N, u, v)``
integer tensors.  Images are ``(N, 3, H, W)`` tensors in ``[0, 1]``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CodeIndexError, DimensionError, DomainError, FormatError
from .nets import AttnBlock, Downsample, ResBlock, Upsample, group_norm


@dataclass(frozen=True)
class VQConfig:
    n_codes: int = 1024
    dim: int = 512
    downsample: int = 16
    base_channels: int = 64
    max_channels: int = 512
    res_blocks: int = 2

    def __post_init__(self):
        if self.n_codes < 2 or self.dim < 1:
            raise DomainError("codebook needs N >= 2 and d >= 1")
        levels = math.log2(self.downsample)
        if self.downsample < 2 or levels != int(levels):
            raise DomainError("downsample factor must be a power of two >= 2")

    @property
    def levels(self):
        return int(math.log2(self.downsample))

    def channels(self):
        return [min(self.base_channels * 2**i, self.max_channels) for i in range(self.levels + 1)]


TOY_VQ = VQConfig(n_codes=64, dim=32, downsample=8, base_channels=16)


# --------------------------------------------------------------------------
# codebook


class Codebook(nn.Module):
    def __init__(self, n_codes, dim):
        super().__init__()
        if n_codes < 2 or dim < 1:
            raise DomainError("codebook needs N >= 2 and d >= 1")
        self.weight = nn.Parameter(torch.empty(n_codes, dim).uniform_(-1.0 / n_codes, 1.0 / n_codes))

    @property
    def n_codes(self):
        return self.weight.shape[0]

    @property
    def dim(self):
        return self.weight.shape[1]


_CBK = struct.Struct("<4sB3xII")
CBK_MAGIC = b"CBK1"


def codebook_to_bytes(weight):
    w = np.ascontiguousarray(torch.as_tensor(weight).detach().cpu().numpy(), dtype="<f4")
    if not np.isfinite(w).all():
        raise DomainError("codebook contains non-finite entries")
    n, d = w.shape
    return _CBK.pack(CBK_MAGIC, 1, n, d) + w.tobytes()


def codebook_from_bytes(data):
    if len(data) < _CBK.size:
        raise FormatError("codebook file shorter than its header")
    magic, version, n, d = _CBK.unpack_from(data)
    if magic != CBK_MAGIC:
        raise FormatError(f"bad codebook magic {magic!r}")
    if version != 1:
        raise FormatError(f"unsupported codebook version {version}")
    body = data[_CBK.size :]
    if len(body) != 4 * n * d:
        raise FormatError(f"codebook body has {len(body)} bytes, expected {4 * n * d}")
    return np.frombuffer(body, dtype="<f4").reshape(n, d).astype(np.float32)


def export_codebook(path, weight):
    with open(path, "wb") as fh:
        fh.write(codebook_to_bytes(weight))


def import_codebook(path):
    with open(path, "rb") as fh:
        return codebook_from_bytes(fh.read())


# --------------------------------------------------------------------------
# encoder / decoder


class Encoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        ch = cfg.channels()
        self.conv_in = nn.Conv2d(3, ch[0], 3, padding=1)
        self.down = nn.ModuleList()
        for i in range(cfg.levels):
            blocks = [ResBlock(ch[i]) for _ in range(cfg.res_blocks)]
            self.down.append(nn.Sequential(*blocks, Downsample(ch[i], ch[i + 1])))
        self.mid = nn.Sequential(ResBlock(ch[-1]), AttnBlock(ch[-1]), ResBlock(ch[-1]))
        self.norm_out = group_norm(ch[-1])
        self.conv_out = nn.Conv2d(ch[-1], cfg.dim, 1)

    def forward(self, x, return_features=False):
        h = self.conv_in(x)
        feats = []
        for stage in self.down:
            feats.append(h)
            h = stage(h)
        h = self.conv_out(F.silu(self.norm_out(self.mid(h))))
        if return_features:
            # full-resolution first; last entry is the latent itself
            return h, feats + [h]
        return h


class Decoder(nn.Module):
    """Mirror of :class:`Encoder`.  ``forward(z, capture=True)`` also returns
    the feature maps entering each upsampling stage, coarse to fine."""

    def __init__(self, cfg):
        super().__init__()
        ch = cfg.channels()
        self.conv_in = nn.Conv2d(cfg.dim, ch[-1], 3, padding=1)
        self.mid = nn.Sequential(ResBlock(ch[-1]), AttnBlock(ch[-1]), ResBlock(ch[-1]))
        self.blocks = nn.ModuleList()
        self.ups = nn.ModuleList()
        for i in range(cfg.levels, 0, -1):
            self.blocks.append(nn.Sequential(*[ResBlock(ch[i]) for _ in range(cfg.res_blocks)]))
            self.ups.append(Upsample(ch[i], ch[i - 1]))
        self.tail = nn.Sequential(*[ResBlock(ch[0]) for _ in range(cfg.res_blocks)])
        self.norm_out = group_norm(ch[0])
        self.conv_out = nn.Conv2d(ch[0], 3, 3, padding=1)
        self.stage_channels = [ch[i] for i in range(cfg.levels, 0, -1)]

    @property
    def final_layer(self):
        return self.conv_out

    def forward(self, z, capture=False):
        h = self.mid(self.conv_in(z))
        acts = []
        for blocks, up in zip(self.blocks, self.ups):
            h = blocks(h)
            acts.append(h)
            h = up(h)
        x = self.conv_out(F.silu(self.norm_out(self.tail(h)))) + 0.5
        return (x, acts) if capture else x


class VQAutoencoder(nn.Module):
    def __init__(self, cfg=TOY_VQ):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.codebook = Codebook(cfg.n_codes, cfg.dim)
        # step at which each code was last selected (dead-code tracking)
        self.register_buffer("last_used", torch.zeros(cfg.n_codes, dtype=torch.long))

    @property
    def downsample(self):
        return self.cfg.downsample

    def forward(self, x):
        f_h = encode_hq(x, self)
        f_c, idx = quantize_nearest(f_h, self.codebook.weight)
        z = straight_through_combine(f_h, f_c)
        return {"x_rec": self.decoder(z), "f_h": f_h, "f_c": f_c, "indices": idx}


# --------------------------------------------------------------------------
# operations


def check_divisible(x, f):
    if x.dim() != 4 or x.shape[1] != 3:
        raise DimensionError(f"expected (N, 3, H, W) images, got {tuple(x.shape)}")
    if x.shape[2] % f or x.shape[3] % f:
        raise DimensionError(f"image {x.shape[2]}x{x.shape[3]} not divisible by {f}")


def encode_hq(x, m):
    check_divisible(x, m.downsample)
    return m.encoder(x)


def _codebook_weight(c):
    return c.weight if isinstance(c, Codebook) else c


def quantize_nearest(f, codebook, chunk=1 << 24):
    """Nearest codebook entry per token (Euclidean); ties go to the lowest index.

    Returns ``(quantized, indices)``.  The distance is evaluated as an explicit
    difference so that duplicated entries produce bit-identical distances.
    """
    c = _codebook_weight(codebook)
    if f.dim() != 4 or f.shape[1] != c.shape[1]:
        raise DimensionError(f"latent {tuple(f.shape)} incompatible with codebook {tuple(c.shape)}")
    n, d, u, v = f.shape
    tokens = f.detach().permute(0, 2, 3, 1).reshape(-1, d)
    cw = c.detach().to(tokens.dtype)
    step = max(1, chunk // (cw.shape[0] * d))
    idx = torch.cat([
        (t[:, None, :] - cw[None]).pow(2).sum(-1).argmin(dim=1)
        for t in tokens.split(step)
    ]) if tokens.shape[0] else tokens.new_zeros(0, dtype=torch.long)
    idx = idx.view(n, u, v)
    return gather_codes(idx, c), idx


def gather_codes(indices, codebook):
    c = _codebook_weight(codebook)
    if indices.numel() and (int(indices.min()) < 0 or int(indices.max()) >= c.shape[0]):
        raise CodeIndexError(f"code index out of range [0, {c.shape[0] - 1}]")
    return F.embedding(indices, c).permute(0, 3, 1, 2)


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, f_h, f_c):
        return f_c.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def straight_through_combine(f_h, f_c):
    """Forward value is ``f_c`` exactly; the gradient flows to ``f_h`` unchanged."""
    if f_h.shape != f_c.shape:
        raise DimensionError(f"shape mismatch {tuple(f_h.shape)} vs {tuple(f_c.shape)}")
    return _StraightThrough.apply(f_h, f_c)


def decode_hq(f_c, m):
    expect = m.cfg.dim
    if f_c.dim() != 4 or f_c.shape[1] != expect:
        raise DimensionError(f"latent must be (N, {expect}, u, v), got {tuple(f_c.shape)}")
    return m.decoder(f_c).clamp(0.0, 1.0)


def code_level_loss(f_h, f_c, alpha=0.25):
    if f_h.shape != f_c.shape:
        raise DimensionError(f"shape mismatch {tuple(f_h.shape)} vs {tuple(f_c.shape)}")
    return F.mse_loss(f_c, f_h.detach()) + alpha * F.mse_loss(f_h, f_c.detach())


def stage1_total_loss(x, x_rec, f_h, f_c, disc, alpha=0.25, *, fx, last_layer,
                      adv_enabled=True, max_weight=1e4, eps=1e-4):
    """``L_rec + L_per + L_cl + lambda_1 * L_adv`` with the adaptive weight
    measured at ``last_layer``.  Returns ``(total, diagnostics)``."""
    from .losses import (adaptive_weight, adversarial_pair_losses, last_layer_grad_norm,
                         perceptual_distance, reconstruction_l1)

    l_rec = reconstruction_l1(x, x_rec)
    l_per = perceptual_distance(x, x_rec, fx)
    l_cl = code_level_loss(f_h, f_c, alpha)
    _, gen, objective = adversarial_pair_losses(disc, x, x_rec, return_objective=True)
    if adv_enabled:
        g_rec = last_layer_grad_norm(l_rec, last_layer)
        g_adv = last_layer_grad_norm(gen, last_layer)
        lam = adaptive_weight(g_rec, g_adv, eps, max_weight=max_weight)
    else:
        lam = 0.0
    total = l_rec + l_per + l_cl + lam * gen
    diag = {
        "rec": l_rec.item(), "per": l_per.item(), "cl": l_cl.item(),
        "gen": gen.item(), "adv_objective": objective.item(), "lambda": float(lam),
        "total": total.item(),
    }
    return total, diag


@torch.no_grad()
def refresh_dead_codes(m, indices, f_h, step, seed, patience=2000):
    """Mark codes used at ``step`` and re-seed codes idle for ``patience``
    steps with randomly chosen encoder tokens from this batch.

    Returns the number of codes re-seeded.
    """
    m.last_used[indices.unique()] = step
    dead = torch.nonzero(step - m.last_used >= patience).flatten()
    if dead.numel() == 0:
        return 0
    tokens = f_h.detach().permute(0, 2, 3, 1).reshape(-1, f_h.shape[1])
    g = torch.Generator().manual_seed(int(seed))
    pick = torch.randint(0, tokens.shape[0], (dead.numel(),), generator=g)
    m.codebook.weight.data[dead] = tokens[pick].to(m.codebook.weight.dtype)
    m.last_used[dead] = step
    return int(dead.numel())


# --------------------------------------------------------------------------
# diagnostics


@dataclass
class UsageReport:
    counts: np.ndarray
    fraction_used: float
    overlap: np.ndarray
    code_sets: list

    def to_dict(self):
        return {
            "counts": self.counts.tolist(),
            "fraction_used": self.fraction_used,
            "overlap": self.overlap.tolist(),
        }


@torch.no_grad()
def code_indices(images, m, batch=16):
    m.eval()
    out = []
    for i in range(0, len(images), batch):
        f_h = encode_hq(images[i : i + batch], m)
        out.append(quantize_nearest(f_h, m.codebook.weight)[1])
    return torch.cat(out)


def usage_stats(corpus, m):
    if len(corpus) == 0:
        raise DomainError("usage statistics need a nonempty corpus")
    idx = code_indices(corpus, m)
    n_codes = m.cfg.n_codes
    counts = np.bincount(idx.flatten().numpy(), minlength=n_codes)
    sets = [set(np.unique(row.numpy()).tolist()) for row in idx]
    k = len(sets)
    overlap = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            overlap[i, j] = overlap[j, i] = len(sets[i] & sets[j]) / len(sets[i] | sets[j])
    return UsageReport(counts, float((counts > 0).mean()), overlap, sets)
