"""Small learned codec: conv analysis/synthesis transforms, rounding
quantizer, per-channel factorized logistic entropy model, arithmetic coder."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from ..data import derive_seed, to_image, to_tensor
from ..errors import DomainError, FormatError
from . import rangecoder
from .base import MINI_ID, Compressor, rd_loss

# operating points of the reference compressor; index into this tuple is the
# bitstream's rate-index
RATE_LAMBDAS = (4e-4, 8e-4, 32e-4, 100e-4, 450e-4)
# distortion is measured on [0, 255] in that convention
DISTORTION_SCALE = 255.0**2


def round_ste(y):
    return y + (torch.round(y) - y).detach()


class FactorizedLogistic(nn.Module):
    """Independent per-channel logistic density, discretized to integer bins."""

    def __init__(self, channels, support=32):
        super().__init__()
        self.loc = nn.Parameter(torch.zeros(channels))
        self.log_scale = nn.Parameter(torch.zeros(channels))
        self.support = support

    def _params(self, ndim):
        shape = (1, -1) + (1,) * (ndim - 2)
        return self.loc.view(shape), self.log_scale.exp().clamp_min(1e-3).view(shape)

    def likelihood(self, y_hat):
        loc, scale = self._params(y_hat.dim())
        upper = torch.sigmoid((y_hat + 0.5 - loc) / scale)
        lower = torch.sigmoid((y_hat - 0.5 - loc) / scale)
        return (upper - lower).clamp_min(1e-9)

    @torch.no_grad()
    def cdf_tables(self):
        """One integer CDF per channel over symbols ``-support..support``;
        tail mass is folded into the end bins."""
        loc, scale = self.loc.double(), self.log_scale.exp().clamp_min(1e-3).double()
        k = torch.arange(-self.support, self.support + 1, dtype=torch.float64)
        edges = torch.cat([k - 0.5, k[-1:] + 0.5])
        cdf = torch.sigmoid((edges[None, :] - loc[:, None]) / scale[:, None])
        cdf[:, 0], cdf[:, -1] = 0.0, 1.0
        pmf = (cdf[:, 1:] - cdf[:, :-1]).numpy()
        return [rangecoder.cdf_from_freq(rangecoder.quantize_pmf(p)) for p in pmf]


class MiniCodecNet(nn.Module):
    downsample = 16

    def __init__(self, channels=64, latent=96, support=32):
        super().__init__()
        c, m = channels, latent

        def down(i, o):
            return nn.Conv2d(i, o, 5, stride=2, padding=2)

        def up(i, o):
            return nn.ConvTranspose2d(i, o, 5, stride=2, padding=2, output_padding=1)

        self.g_a = nn.Sequential(
            down(3, c), nn.GELU(), down(c, c), nn.GELU(), down(c, c), nn.GELU(), down(c, m)
        )
        self.g_s = nn.Sequential(
            up(m, c), nn.GELU(), up(c, c), nn.GELU(), up(c, c), nn.GELU(), up(c, 3)
        )
        self.entropy = FactorizedLogistic(m, support)
        self.latent = m

    def forward(self, x):
        y = self.g_a(x)
        y_hat = round_ste(y)
        x_hat = self.g_s(y_hat) + 0.5
        bits = -torch.log2(self.entropy.likelihood(y_hat)).sum()
        bpp = bits / (x.shape[0] * x.shape[2] * x.shape[3])
        return x_hat, bpp


class MiniCodec(Compressor):
    codec_id = MINI_ID
    name = "mini"
    downsample = MiniCodecNet.downsample

    def __init__(self, net=None, rate_index=0, seed=0):
        if not 0 <= rate_index < len(RATE_LAMBDAS):
            raise DomainError(f"rate index must be in [0, {len(RATE_LAMBDAS) - 1}]")
        if net is None:
            torch.manual_seed(seed)
            net = MiniCodecNet()
        self.net = net.eval()
        self.rate_index = int(rate_index)
        self.rate_param = RATE_LAMBDAS[self.rate_index]
        self._tables = None

    def _cdfs(self):
        if self._tables is None:
            self._tables = self.net.entropy.cdf_tables()
        return self._tables

    @torch.no_grad()
    def latents(self, x):
        y = torch.round(self.net.g_a(to_tensor(x)))
        r = self.net.entropy.support
        return y.clamp(-r, r)

    @torch.no_grad()
    def estimated_bits(self, x):
        """Model code length of the coded symbols, in bits."""
        y_hat = self.latents(x)
        return float(-torch.log2(self.net.entropy.likelihood(y_hat)).sum())

    def _encode(self, x):
        y_hat = self.latents(x)[0]  # (M, h, w)
        m = y_hat.shape[0]
        symbols = (y_hat.reshape(m, -1).to(torch.int64) + self.net.entropy.support).numpy()
        index = np.repeat(np.arange(m), symbols.shape[1])
        return rangecoder.encode(symbols.reshape(-1), index, self._cdfs())

    @torch.no_grad()
    def _decode(self, payload, height, width):
        f = self.downsample
        m, h, w = self.net.latent, height // f, width // f
        index = np.repeat(np.arange(m), h * w)
        try:
            symbols = rangecoder.decode(payload, index, self._cdfs())
        except ValueError as exc:
            raise FormatError(str(exc)) from exc
        y_hat = torch.from_numpy(symbols - self.net.entropy.support).float().view(1, m, h, w)
        return to_image(self.net.g_s(y_hat) + 0.5)

    @torch.no_grad()
    def degrade(self, x):
        # entropy coding is lossless, so skip it
        return np.clip(to_image(self.net.g_s(self.latents(x)) + 0.5), 0.0, 1.0)

    def state(self):
        return {"net": self.net.state_dict(), "rate_index": self.rate_index}

    @classmethod
    def from_state(cls, state):
        net = MiniCodecNet()
        net.load_state_dict(state["net"])
        return cls(net, rate_index=state["rate_index"])


def train_mini_codec(images, rate_index=0, steps=2000, batch=8, lr=1e-3, seed=0, log=None):
    """Fit a :class:`MiniCodec` at one operating point by minimizing
    ``bpp + lambda * 255^2 * MSE``."""
    images = np.asarray(images, dtype=np.float32)
    torch.manual_seed(seed)
    net = MiniCodecNet()
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    lam = RATE_LAMBDAS[rate_index] * DISTORTION_SCALE
    net.train()
    for step in range(steps):
        rng = np.random.default_rng(derive_seed(seed, step))
        x = to_tensor(images[rng.integers(0, len(images), size=batch)])
        x_hat, bpp = net(x)
        loss = rd_loss(x, x_hat, bpp, lam)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if log is not None and step % 100 == 0:
            log(step, loss.item(), bpp.item())
    return MiniCodec(net, rate_index=rate_index)
