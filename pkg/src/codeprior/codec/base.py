"""Compressor interface and the two non-learned implementations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..data import check_image, to_image, to_tensor
from ..errors import CodecError, DimensionError, DomainError, FormatError
from .bitstream import Bitstream

IDENTITY_ID = 0
STUB_ID = 1
MINI_ID = 2


class Compressor:
    """A frozen codec: image in, :class:`Bitstream` out, and back.

    Subclasses set ``codec_id``, ``name`` and ``downsample`` and implement
    ``_encode`` / ``_decode`` on payload bytes.
    """

    codec_id = -1
    name = "abstract"
    downsample = 1
    rate_param = 0.0
    rate_index = 0

    def compress(self, x):
        x = check_image(x)
        h, w, _ = x.shape
        f = self.downsample
        if h % f or w % f:
            raise DimensionError(f"{self.name}: {h}x{w} not divisible by {f}")
        payload = self._encode(np.asarray(x, dtype=np.float32))
        return Bitstream(self.codec_id, w, h, self.rate_index, payload)

    def decompress(self, b):
        if b.codec_id != self.codec_id:
            raise CodecError(f"bitstream codec {b.codec_id} != {self.name} ({self.codec_id})")
        if b.rate_index != self.rate_index:
            raise CodecError(f"bitstream rate index {b.rate_index} != {self.rate_index}")
        out = self._decode(b.payload, b.height, b.width)
        return np.clip(out, 0.0, 1.0).astype(np.float32)

    def roundtrip(self, x):
        return self.decompress(self.compress(x))

    def degrade(self, x):
        """Decoded image for ``x``; same result as :meth:`roundtrip`, possibly
        without producing the bitstream."""
        return self.roundtrip(x)

    def _encode(self, x):
        raise NotImplementedError

    def _decode(self, payload, height, width):
        raise NotImplementedError


def compress(x, c):
    return c.compress(x)


def decompress(b, c):
    return c.decompress(b)


class IdentityCompressor(Compressor):
    """Lossless float32 passthrough; useful as a no-degradation control."""

    codec_id = IDENTITY_ID
    name = "identity"

    def _encode(self, x):
        return x.astype("<f4").tobytes()

    def _decode(self, payload, height, width):
        n = height * width * 3
        if len(payload) != 4 * n:
            raise FormatError("identity payload has the wrong size")
        return np.frombuffer(payload, dtype="<f4").reshape(height, width, 3).copy()


class StubCompressor(Compressor):
    """Area-downsample by ``scale``, quantize to ``bits`` per sample, pack.

    Decoding dequantizes and upsamples bilinearly.  Payload size is exactly
    ``ceil(3 * (H/scale) * (W/scale) * bits / 8)`` bytes.
    """

    codec_id = STUB_ID
    name = "stub"

    def __init__(self, scale=2, bits=4, rate_param=0.0):
        if not 1 <= scale <= 32:
            raise DomainError("stub scale must be in [1, 32]")
        if not 1 <= bits <= 8:
            raise DomainError("stub bits must be in [1, 8]")
        self.scale = int(scale)
        self.bits = int(bits)
        self.downsample = self.scale
        self.rate_param = float(rate_param)
        self.rate_index = ((self.scale - 1) << 3) | (self.bits - 1)

    @property
    def levels(self):
        return (1 << self.bits) - 1

    def quantize(self, v):
        return np.clip(np.floor(v * self.levels + 0.5), 0, self.levels).astype(np.uint8)

    def _encode(self, x):
        h, w, _ = x.shape
        s = self.scale
        small = x.reshape(h // s, s, w // s, s, 3).mean(axis=(1, 3))
        q = self.quantize(small).reshape(-1)
        # each value as `bits` big-endian bits
        shifts = np.arange(self.bits - 1, -1, -1, dtype=np.uint8)
        bitplane = ((q[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1)
        return np.packbits(bitplane).tobytes()

    def _decode(self, payload, height, width):
        s = self.scale
        hs, ws = height // s, width // s
        n = hs * ws * 3
        if len(payload) != -(-n * self.bits // 8):
            raise FormatError("stub payload has the wrong size")
        bitplane = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))[: n * self.bits]
        weights = (1 << np.arange(self.bits - 1, -1, -1)).astype(np.int64)
        q = (bitplane.reshape(n, self.bits).astype(np.int64) * weights).sum(axis=1)
        small = (q / self.levels).astype(np.float32).reshape(hs, ws, 3)
        if s == 1:
            return small
        up = F.interpolate(to_tensor(small), scale_factor=s, mode="bilinear", align_corners=False)
        return to_image(up)


def rd_loss(x, x_dec, rate_bits, lam):
    """Rate-distortion objective ``R + lam * MSE(x, x_dec)``.

    ``rate_bits`` is the rate in bits per pixel.  Works on numpy arrays or
    torch tensors (differentiable in the latter case).
    """
    if tuple(x.shape) != tuple(x_dec.shape):
        raise DimensionError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_dec.shape)}")
    if lam < 0:
        raise DomainError("lambda must be nonnegative")
    if torch.is_tensor(x) or torch.is_tensor(x_dec):
        if not torch.is_tensor(rate_bits) and rate_bits < 0:
            raise DomainError("rate must be nonnegative")
        return rate_bits + lam * torch.mean((x - x_dec) ** 2)
    if rate_bits < 0:
        raise DomainError("rate must be nonnegative")
    diff = np.asarray(x, dtype=np.float64) - np.asarray(x_dec, dtype=np.float64)
    return float(rate_bits + lam * np.mean(diff**2))


@dataclass
class RDPoint:
    """One operating point: corpus-mean quality at a measured rate."""

    bpp: float
    psnr: float
    ms_ssim: float
    perceptual_proxy: float
    rate_param: float

    def __post_init__(self):
        if not 0.0 <= self.ms_ssim <= 1.0:
            raise DomainError(f"MS-SSIM {self.ms_ssim} outside [0, 1]")
        if self.bpp < 0 or self.perceptual_proxy < 0:
            raise DomainError("bpp and perceptual proxy must be nonnegative")
