"""Image-level losses shared by Stages I and III."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import spectral_norm

from .errors import DimensionError, DomainError, NumericError


def _same_shape(x, y):
    if tuple(x.shape) != tuple(y.shape):
        raise DimensionError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")


class FeatureExtractor(nn.Module):
    """Fixed five-stage convolutional feature stack.

    Weights are drawn once from a seeded generator (``random-fixed`` mode) or
    loaded from a state-dict file (``loaded-weights`` mode) and never trained.
    Features are tapped after stages 2, 3 and 4 by default.
    """

    def __init__(self, widths=(32, 64, 96, 128, 128), taps=(1, 2, 3), seed=1234, weights=None):
        super().__init__()
        self.taps = tuple(taps)
        g = torch.Generator().manual_seed(seed)
        stages, cin = [], 3
        for i, w in enumerate(widths):
            conv = nn.Conv2d(cin, w, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / (9 * cin)) ** 0.5)
                conv.bias.zero_()
            layers = [nn.AvgPool2d(2)] if i > 0 else []
            stages.append(nn.Sequential(*layers, conv, nn.ReLU()))
            cin = w
        self.stages = nn.ModuleList(stages)
        self.mode = "random-fixed"
        if weights is not None:
            self.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
            self.mode = "loaded-weights"
        self.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        # stays in eval mode; there is nothing to train
        return super().train(False)

    def forward(self, x):
        h = x * 2.0 - 1.0
        feats = []
        for i, stage in enumerate(self.stages):
            if i > max(self.taps):
                break
            h = stage(h)
            if i in self.taps:
                feats.append(h)
        return feats


class Discriminator(nn.Module):
    """Strided patch classifier with spectral normalization.

    ``forward`` returns logits; ``probability`` squashes them to (0, 1).
    """

    def __init__(self, ndf=32):
        super().__init__()

        def conv(i, o, stride):
            return spectral_norm(nn.Conv2d(i, o, 3, stride=stride, padding=1))

        self.net = nn.Sequential(
            conv(3, ndf, 2), nn.LeakyReLU(0.2),
            conv(ndf, 2 * ndf, 2), nn.LeakyReLU(0.2),
            conv(2 * ndf, 4 * ndf, 2), nn.LeakyReLU(0.2),
            conv(4 * ndf, 1, 1),
        )

    def forward(self, x):
        return self.net(x * 2.0 - 1.0)

    def probability(self, x):
        return torch.sigmoid(self(x))


def reconstruction_l1(x, y):
    _same_shape(x, y)
    return torch.mean(torch.abs(x - y))


def perceptual_distance(x, y, fx):
    """Sum over tap layers of the mean squared feature difference."""
    _same_shape(x, y)
    return sum(F.mse_loss(a, b) for a, b in zip(fx(x), fx(y)))


def _logits(disc, x):
    out = disc(x)
    if not torch.isfinite(out).all():
        raise NumericError("discriminator produced non-finite output")
    return out


def discriminator_loss(disc, x, x_fake):
    """Negated ``log D(x) + log(1 - D(x_fake))``; the fake is detached."""
    real = _logits(disc, x)
    fake = _logits(disc, x_fake.detach())
    return -(F.logsigmoid(real).mean() + F.logsigmoid(-fake).mean())


def generator_loss(disc, x_fake):
    """Non-saturating generator objective ``-log D(x_fake)``."""
    return -F.logsigmoid(_logits(disc, x_fake)).mean()


def adversarial_pair_losses(disc, x, x_fake, return_objective=False):
    """``(disc_loss, gen_loss)``; optionally also the raw two-term objective
    ``log D(x) + log(1 - D(x_fake))`` that the discriminator maximizes."""
    _same_shape(x, x_fake)
    d_loss = discriminator_loss(disc, x, x_fake)
    g_loss = generator_loss(disc, x_fake)
    if return_objective:
        return d_loss, g_loss, -d_loss.detach()
    return d_loss, g_loss


def adaptive_weight(grad_rec_norm, grad_adv_norm, eps=1e-4, max_weight=1e4):
    """``grad_rec_norm / (grad_adv_norm + eps)`` clamped to ``[0, max_weight]``."""
    grad_rec_norm, grad_adv_norm = float(grad_rec_norm), float(grad_adv_norm)
    if grad_rec_norm < 0 or grad_adv_norm < 0:
        raise DomainError("gradient norms must be nonnegative")
    if eps <= 0:
        raise DomainError("eps must be positive")
    return min(max(grad_rec_norm / (grad_adv_norm + eps), 0.0), max_weight)


def last_layer_grad_norm(loss, layer):
    """Euclidean norm of ``d loss / d layer.weight`` (0 if unconnected)."""
    if not loss.requires_grad:
        return 0.0
    (g,) = torch.autograd.grad(loss, layer.weight, retain_graph=True, allow_unused=True)
    return 0.0 if g is None else float(g.norm())
