"""Stage III: hierarchical prior integration.

The frozen Stage I decoder is run on the predicted codes; the feature maps
entering its first three upsampling stages are projected to half their width
and queried, scale by scale, by the enhancement network through multi-head
cross-attention modules (MCMs).
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import DimensionError, StageError, StateError
from .lookup import encode_lq, predict_codes
from .nets import ResBlock, TransformerBlock, Upsample, from_tokens, to_tokens
from .vq import gather_codes

N_SCALES = 3


class MCM(nn.Module):
    """Multi-head cross-attention from intermediate features (queries) to prior
    features (keys/values).  All projections are bias-free."""

    def __init__(self, dim, prior_dim, heads, tau=None):
        super().__init__()
        if dim % heads:
            raise DimensionError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.tau = float(tau) if tau is not None else dim / heads
        if self.tau <= 0:
            raise DimensionError("tau must be positive")
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(prior_dim)
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(prior_dim, dim, bias=False)
        self.w_v = nn.Linear(prior_dim, dim, bias=False)
        self.w_o = nn.Linear(dim, dim, bias=False)

    def forward(self, m, p, return_attention=False):
        return mcm_fuse(m, p, self, return_attention=return_attention)


def mcm_fuse(m, p, mcm, return_attention=False, residual=True):
    """Fuse prior map ``p`` into feature map ``m`` (both ``(N, C, H, W)``)."""
    if m.dim() != 4 or p.dim() != 4 or m.shape[0] != p.shape[0] or m.shape[2:] != p.shape[2:]:
        raise DimensionError(f"feature {tuple(m.shape)} and prior {tuple(p.shape)} grids differ")
    n, c, h, w = m.shape
    if c != mcm.w_q.in_features or p.shape[1] != mcm.w_k.in_features:
        raise DimensionError("channel widths do not match the MCM configuration")
    heads, hd = mcm.heads, c // mcm.heads

    def split(z):
        return z.reshape(n, -1, heads, hd).transpose(1, 2)

    tm, tp = mcm.norm_q(to_tokens(m)), mcm.norm_kv(to_tokens(p))
    q, k, v = split(mcm.w_q(tm)), split(mcm.w_k(tp)), split(mcm.w_v(tp))
    att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(mcm.tau), dim=-1)
    out = mcm.w_o((att @ v).transpose(1, 2).reshape(n, h * w, c))
    out = from_tokens(out, h, w)
    if residual:
        out = m + out
    return (out, att) if return_attention else out


def prior_projections(decoder_channels):
    """1x1 convolutions halving each captured decoder feature map."""
    return nn.ModuleList(nn.Conv2d(ch, ch // 2, 1) for ch in decoder_channels[:N_SCALES])


def extract_priors(dh_activations, projections):
    if dh_activations is None or len(dh_activations) < len(projections):
        raise StateError("decoder activations were not captured for every prior scale")
    priors = []
    for act, proj in zip(dh_activations, projections):
        if act is None:
            raise StateError("missing decoder activation")
        priors.append(proj(act))
    return priors


class HPIN(nn.Module):
    """Enhancement network: per scale, two Transformer blocks produce ``M_i``
    which an MCM fuses with prior ``P_i``; a zero-initialised head adds a
    residual to the decoded image."""

    def __init__(self, vq_cfg, heads=(4, 2, 2), blocks_per_scale=2, max_kv_side=32):
        super().__init__()
        if vq_cfg.levels < N_SCALES - 1:
            raise DimensionError("the Stage I decoder needs at least two upsampling stages")
        ch = vq_cfg.channels()
        levels = vq_cfg.levels
        dec_ch = [ch[levels - i] for i in range(N_SCALES)]
        n_scales = min(N_SCALES, levels)
        dec_ch = dec_ch[:n_scales]
        self.widths = [c // 2 for c in dec_ch]
        self.heads = tuple(heads[:n_scales])
        self.projections = prior_projections(dec_ch)
        self.proj_in = nn.Conv2d(vq_cfg.dim, self.widths[0], 1)
        # encoder features at the finer scales: level L-i has ch[L-i] channels
        self.skips = nn.ModuleList(
            nn.Conv2d(ch[levels - i], self.widths[i], 1) for i in range(1, n_scales)
        )
        self.blocks = nn.ModuleList(
            nn.ModuleList(TransformerBlock(w, h, max_kv_side=max_kv_side) for _ in range(blocks_per_scale))
            for w, h in zip(self.widths, self.heads)
        )
        self.mcms = nn.ModuleList(
            MCM(w, w, h) for w, h in zip(self.widths, self.heads)
        )
        self.ups = nn.ModuleList(
            Upsample(self.widths[i], self.widths[i + 1]) for i in range(n_scales - 1)
        )
        tail = []
        for _ in range(levels - n_scales + 1):
            tail += [Upsample(self.widths[-1], self.widths[-1]), ResBlock(self.widths[-1])]
        self.tail = nn.Sequential(*tail)
        self.head = nn.Conv2d(self.widths[-1], 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @property
    def final_layer(self):
        return self.head

    def forward(self, x_lq, f_l, enc_feats, priors, use_prior=True):
        levels = len(enc_feats) - 1
        h = self.proj_in(f_l)
        for i, (blocks, mcm) in enumerate(zip(self.blocks, self.mcms)):
            if i > 0:
                h = self.ups[i - 1](h) + self.skips[i - 1](enc_feats[levels - i])
            _, _, gh, gw = h.shape
            t = to_tokens(h)
            for blk in blocks:
                t = blk(t, grid=(gh, gw))
            h = from_tokens(t, gh, gw)
            if use_prior:
                h = mcm_fuse(h, priors[i], mcm)
        return x_lq + self.head(self.tail(h))


def _staged(label, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        raise StageError(label, exc) from exc


def stage3_forward(x_lq, predictor, vq, hpin, use_prior=True):
    """Full decoder-side pipeline; returns intermediates and the unclamped
    enhanced image.  Only ``x_lq`` and model state are consumed."""
    f_l, feats = _staged("encode_lq", encode_lq, x_lq, predictor, return_features=True)
    logits, codes = _staged("predict_codes", predict_codes, f_l, predictor)
    f_hat = _staged("gather_codes", gather_codes, codes, vq.codebook.weight)
    with torch.no_grad():
        _, acts = _staged("decode_hq", vq.decoder, f_hat, capture=True)
    priors = _staged("extract_priors", extract_priors, acts[: len(hpin.projections)], hpin.projections)
    x_hat = _staged("hpin", hpin, x_lq, f_l, feats, priors, use_prior=use_prior)
    return {"f_l": f_l, "logits": logits, "codes": codes, "x_hat": x_hat}


@torch.no_grad()
def hpin_decode(x_lq, predictor, vq, hpin, use_prior=True):
    """Enhance decoded images ``(N, 3, H, W)``; output in ``[0, 1]``."""
    for mod in (predictor, vq, hpin):
        mod.eval()
    return stage3_forward(x_lq, predictor, vq, hpin, use_prior)["x_hat"].clamp(0.0, 1.0)


def stage3_loss(x, x_hat, stage2_total, disc, *, fx, last_layer, adv_enabled=True,
                eps=1e-4, max_weight=1e4):
    """``L_s2 + L'_rec + L'_per + lambda_3 * L'_adv``; returns ``(total, diagnostics)``."""
    from .losses import (adaptive_weight, generator_loss, last_layer_grad_norm,
                         perceptual_distance, reconstruction_l1)

    l_rec = reconstruction_l1(x, x_hat)
    l_per = perceptual_distance(x, x_hat, fx)
    gen = generator_loss(disc, x_hat)
    if adv_enabled:
        lam = adaptive_weight(
            last_layer_grad_norm(l_rec, last_layer), last_layer_grad_norm(gen, last_layer),
            eps, max_weight=max_weight,
        )
    else:
        lam = 0.0
    total = stage2_total + l_rec + l_per + lam * gen
    diag = {
        "s2": stage2_total.item(), "rec": l_rec.item(), "per": l_per.item(),
        "gen": gen.item(), "lambda": float(lam), "total": total.item(),
    }
    return total, diag
