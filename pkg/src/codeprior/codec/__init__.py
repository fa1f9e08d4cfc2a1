"""Pluggable baseline compressors and bitstream accounting."""

from .base import (
    IDENTITY_ID,
    MINI_ID,
    STUB_ID,
    Compressor,
    RDPoint,
    IdentityCompressor,
    StubCompressor,
    compress,
    decompress,
    rd_loss,
)
from .bitstream import HEADER_SIZE, Bitstream, bpp_of
from .mini import RATE_LAMBDAS, MiniCodec, MiniCodecNet, train_mini_codec


def compressor_for(b, mini=None):
    """Pick the compressor able to decode bitstream ``b``."""
    if b.codec_id == IDENTITY_ID:
        return IdentityCompressor()
    if b.codec_id == STUB_ID:
        scale, bits = (b.rate_index >> 3) + 1, (b.rate_index & 7) + 1
        return StubCompressor(scale=scale, bits=bits)
    if b.codec_id == MINI_ID:
        if mini is None:
            from ..errors import CodecError

            raise CodecError("mini-codec bitstream needs trained codec weights")
        return mini
    from ..errors import CodecError

    raise CodecError(f"unknown codec id {b.codec_id}")


__all__ = [
    "Bitstream", "Compressor", "HEADER_SIZE", "IdentityCompressor", "MiniCodec",
    "MiniCodecNet", "RATE_LAMBDAS", "RDPoint", "StubCompressor", "bpp_of", "compress",
    "compressor_for", "decompress", "rd_loss", "train_mini_codec",
]
