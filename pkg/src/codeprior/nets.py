"""Convolutional and Transformer building blocks shared by every stage."""

import math

import torch
import torch.nn.functional as F
from torch import nn


def group_norm(ch):
    return nn.GroupNorm(max(1, min(32, ch // 4)), ch, eps=1e-6)


class ResBlock(nn.Module):
    def __init__(self, cin, cout=None):
        super().__init__()
        cout = cout or cin
        self.norm1 = group_norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = group_norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttnBlock(nn.Module):
    """Single-head spatial self-attention with a residual connection."""

    def __init__(self, ch):
        super().__init__()
        self.norm = group_norm(ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        n, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(n, 3, c, h * w).unbind(1)
        att = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ att.transpose(1, 2)).reshape(n, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class MultiHeadSelfAttention(nn.Module):
    """Token self-attention.  Keys/values may be average-pooled on a grid to
    bound cost when the token grid is large."""

    def __init__(self, dim, heads, max_kv_side=None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.max_kv_side = max_kv_side

    def forward(self, x, grid=None):
        n, t, c = x.shape
        hd = c // self.heads
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        if grid is not None and self.max_kv_side and max(grid) > self.max_kv_side:
            stride = math.ceil(max(grid) / self.max_kv_side)

            def pool(z):
                z = z.transpose(1, 2).reshape(n, c, *grid)
                return F.avg_pool2d(z, stride, ceil_mode=True).flatten(2).transpose(1, 2)

            k, v = pool(k), pool(v)

        def split(z):
            return z.reshape(n, -1, self.heads, hd).transpose(1, 2)

        out = F.scaled_dot_product_attention(split(q), split(k), split(v))
        return self.proj(out.transpose(1, 2).reshape(n, t, c))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + feed-forward block over ``(N, T, C)`` tokens."""

    def __init__(self, dim, heads, ffn_mult=4, max_kv_side=None):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, max_kv_side)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_mult * dim), nn.GELU(), nn.Linear(ffn_mult * dim, dim)
        )

    def forward(self, x, grid=None):
        x = x + self.attn(self.norm1(x), grid)
        return x + self.ffn(self.norm2(x))


def to_tokens(x):
    """``(N, C, H, W)`` -> ``(N, H*W, C)``."""
    return x.flatten(2).transpose(1, 2)


def from_tokens(t, h, w):
    return t.transpose(1, 2).reshape(t.shape[0], -1, h, w)
