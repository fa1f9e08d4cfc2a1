"""Stage II: predict code indices for a degraded image with a Transformer."""

from __future__ import annotations

import copy

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError
from .nets import TransformerBlock, to_tokens
from .vq import Encoder, check_divisible, gather_codes  # noqa: F401  (re-exported)


class CodePredictor(nn.Module):
    """Encoder ``E_L`` followed by ``layers`` pre-norm Transformer blocks and a
    linear head producing one logit per codebook entry for every token.

    Position embeddings are learned on a ``grid`` token lattice and resized
    bilinearly when the input lattice differs.
    """

    def __init__(self, cfg, grid=(8, 8), layers=4, heads=8):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.grid = tuple(grid)
        self.pos = nn.Parameter(torch.zeros(1, cfg.dim, *self.grid))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(TransformerBlock(cfg.dim, heads) for _ in range(layers))
        self.norm = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, cfg.n_codes)

    @property
    def downsample(self):
        return self.cfg.downsample

    @classmethod
    def from_stage1(cls, vq, grid=(8, 8), layers=4, heads=8):
        p = cls(vq.cfg, grid, layers, heads)
        p.encoder.load_state_dict(copy.deepcopy(vq.encoder.state_dict()))
        return p

    def position(self, u, v):
        if (u, v) == self.grid:
            return self.pos
        return F.interpolate(self.pos, size=(u, v), mode="bilinear", align_corners=False)

    def forward(self, x):
        f_l = encode_lq(x, self)
        logits, codes = predict_codes(f_l, self)
        return f_l, logits, codes


def encode_lq(x, p, return_features=False):
    check_divisible(x, p.downsample)
    return p.encoder(x, return_features=return_features)


def predict_codes(f_l, p):
    """Returns ``(logits, codes)``: logits ``(N, u*v, n_codes)`` and the
    per-token argmax ``(N, u, v)``."""
    if f_l.dim() != 4 or f_l.shape[1] != p.cfg.dim:
        raise DimensionError(f"latent must be (N, {p.cfg.dim}, u, v), got {tuple(f_l.shape)}")
    n, _, u, v = f_l.shape
    t = to_tokens(f_l + p.position(u, v))
    for blk in p.blocks:
        t = blk(t)
    logits = p.head(p.norm(t))
    return logits, logits.argmax(dim=-1).view(n, u, v)


def stage2_loss(logits, codes, f_l, f_c, lam2=0.5):
    """``L_qf + lam2 * L_ce``: feature MSE to the (detached) quantized target
    plus mean token cross-entropy in nats."""
    if logits.shape[:2] != (codes.shape[0], codes[0].numel()):
        raise DimensionError(f"logits {tuple(logits.shape)} do not match codes {tuple(codes.shape)}")
    if f_l.shape != f_c.shape:
        raise DimensionError(f"shape mismatch {tuple(f_l.shape)} vs {tuple(f_c.shape)}")
    l_ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), codes.reshape(-1))
    l_qf = F.mse_loss(f_l, f_c.detach())
    total = l_qf + lam2 * l_ce
    return total, {"ce": l_ce.item(), "qf": l_qf.item(), "total": total.item()}


def code_accuracy(logits, codes):
    return float((logits.argmax(-1) == codes.reshape(codes.shape[0], -1)).float().mean())


__all__ = [
    "CodePredictor", "code_accuracy", "encode_lq", "gather_codes",
    "predict_codes", "stage2_loss",
]
