"""Image quality metrics and corpus-level rate/quality evaluation."""

from __future__ import annotations

import csv
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .codec.base import RDPoint
from .errors import DimensionError, DomainError

PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WIN, _SIGMA = 11, 1.5
TABLE_HEADER = ("method", "rate_param", "bpp", "psnr", "ms_ssim", "perc_proxy")


def _as_nchw(x, dtype=torch.float64):
    if torch.is_tensor(x):
        t = x.detach().to(dtype)
        return t if t.dim() == 4 else t.unsqueeze(0)
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise DimensionError(f"expected HxWx3 image(s), got {arr.shape}")
    return torch.from_numpy(arr.transpose(0, 3, 1, 2).copy()).to(dtype)


def _check(x, y):
    if tuple(x.shape) != tuple(y.shape):
        raise DimensionError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")


def psnr(x, y, peak=1.0):
    _check(x, y)
    a, b = _as_nchw(x), _as_nchw(y)
    mse = float(torch.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return 10.0 * math.log10(peak**2 / mse)


def _gaussian_window(dtype):
    coords = torch.arange(_WIN, dtype=dtype) - _WIN // 2
    g = torch.exp(-(coords**2) / (2 * _SIGMA**2))
    return g / g.sum()


def _filter(x, g):
    c = x.shape[1]
    x = F.conv2d(x, g.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    return F.conv2d(x, g.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)


def _ssim_cs(x, y, g, peak):
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mu_x, mu_y = _filter(x, g), _filter(y, g)
    sxx = _filter(x * x, g) - mu_x * mu_x
    syy = _filter(y * y, g) - mu_y * mu_y
    sxy = _filter(x * y, g) - mu_x * mu_y
    cs_map = (2 * sxy + c2) / (sxx + syy + c2)
    ssim_map = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1) * cs_map
    return ssim_map.flatten(2).mean(-1), cs_map.flatten(2).mean(-1)


def ms_ssim_scales(height, width):
    """Number of scales usable for an image: each scale must fit the window."""
    side, k = min(height, width), 0
    while k < len(MS_SSIM_WEIGHTS) and side >= _WIN:
        k += 1
        side = -(-side // 2)
    return k


def ms_ssim(x, y, peak=1.0):
    """Multi-scale SSIM averaged over channels (and images).

    Images smaller than 161 pixels on a side use fewer scales, with the
    leading weights renormalized to sum to one.
    """
    _check(x, y)
    a, b = _as_nchw(x), _as_nchw(y)
    k = ms_ssim_scales(*a.shape[2:])
    if k == 0:
        raise DimensionError(f"image {tuple(a.shape[2:])} too small for MS-SSIM")
    w = torch.tensor(MS_SSIM_WEIGHTS[:k], dtype=a.dtype)
    w = w / w.sum()
    g = _gaussian_window(a.dtype)
    factors = []
    for i in range(k):
        ssim_pc, cs_pc = _ssim_cs(a, b, g, peak)
        if i < k - 1:
            factors.append(torch.relu(cs_pc))
            pad = [s % 2 for s in a.shape[2:]]
            a = F.avg_pool2d(a, 2, padding=pad, count_include_pad=False)
            b = F.avg_pool2d(b, 2, padding=pad, count_include_pad=False)
    factors.append(torch.relu(ssim_pc))
    val = torch.prod(torch.stack(factors) ** w.view(-1, 1, 1), dim=0)
    return float(val.mean().clamp(0.0, 1.0))


@torch.no_grad()
def perceptual_proxy(x, y, fx, eps=1e-12):
    """Feature distance normalized by feature energy, summed over taps.

    Stands in for learned perceptual metrics; it is not FID or LPIPS.
    """
    _check(x, y)
    a, b = _as_nchw(x, torch.float32), _as_nchw(y, torch.float32)
    total = 0.0
    for fa, fb in zip(fx(a), fx(b)):
        num = torch.mean((fa - fb) ** 2)
        den = torch.mean(fa**2) + torch.mean(fb**2)
        total += float(num / (den + eps))
    return total


# --------------------------------------------------------------------------
# corpus evaluation


@dataclass
class EvalSample:
    image_id: str
    method: str
    rate_param: float
    reference: np.ndarray
    output: np.ndarray
    bpp: float


@dataclass
class EvalRow:
    image_id: str
    method: str
    rate_param: float
    bpp: float
    psnr: float
    ms_ssim: float
    perc_proxy: float


@dataclass
class EvalReport:
    rows: list
    rd_points: OrderedDict = field(default_factory=OrderedDict)  # (method, rate) -> RDPoint

    @property
    def methods(self):
        return list(OrderedDict.fromkeys(m for m, _ in self.rd_points))

    def curve(self, method):
        return [p for (m, _), p in self.rd_points.items() if m == method]

    def write_table(self, path):
        """Plot-data table: one row per (method, rate)."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TABLE_HEADER)
            for (method, rate), p in self.rd_points.items():
                w.writerow([method, repr(rate), f"{p.bpp:.6f}", f"{p.psnr:.4f}",
                            f"{p.ms_ssim:.6f}", f"{p.perceptual_proxy:.6f}"])

    def write_rows(self, path):
        """Per-image rows followed by one mean row per (method, rate)."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("image",) + TABLE_HEADER)
            for r in self.rows:
                w.writerow([r.image_id, r.method, repr(r.rate_param), f"{r.bpp:.6f}",
                            f"{r.psnr:.4f}", f"{r.ms_ssim:.6f}", f"{r.perc_proxy:.6f}"])
            for (method, rate), p in self.rd_points.items():
                w.writerow(["mean", method, repr(rate), f"{p.bpp:.6f}", f"{p.psnr:.4f}",
                            f"{p.ms_ssim:.6f}", f"{p.perceptual_proxy:.6f}"])


def evaluate_corpus(samples, fx):
    """Score every sample and average per (method, rate)."""
    samples = list(samples)
    if not samples:
        raise DomainError("cannot evaluate an empty corpus")
    rows = []
    for s in samples:
        rows.append(EvalRow(
            s.image_id, s.method, float(s.rate_param), float(s.bpp),
            psnr(s.reference, s.output), ms_ssim(s.reference, s.output),
            perceptual_proxy(s.reference, s.output, fx),
        ))
    groups = OrderedDict()
    for r in rows:
        groups.setdefault((r.method, r.rate_param), []).append(r)
    points = OrderedDict()
    for key, rs in groups.items():
        points[key] = RDPoint(
            bpp=float(np.mean([r.bpp for r in rs])),
            psnr=float(np.mean([r.psnr for r in rs])),
            ms_ssim=float(np.mean([r.ms_ssim for r in rs])),
            perceptual_proxy=float(np.mean([r.perc_proxy for r in rs])),
            rate_param=key[1],
        )
    return EvalReport(rows, points)
