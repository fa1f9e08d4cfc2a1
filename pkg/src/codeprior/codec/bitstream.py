"""Self-describing container for compressed payloads.

Layout (little-endian)::

    magic "CRS0" | version u8 | codec-id u8 | width u16 | height u16 |
    rate-index u8 | reserved u8 | payload-length u32 | payload
"""

import struct
from dataclasses import dataclass

from ..errors import DomainError, FormatError

MAGIC = b"CRS0"
VERSION = 1
_HEADER = struct.Struct("<4sBBHHBBI")
HEADER_SIZE = _HEADER.size


@dataclass(frozen=True)
class Bitstream:
    codec_id: int
    width: int
    height: int
    rate_index: int
    payload: bytes
    version: int = VERSION

    def __post_init__(self):
        if not (0 < self.width < 1 << 16 and 0 < self.height < 1 << 16):
            raise DomainError(f"image size {self.width}x{self.height} not representable")
        if not 0 <= self.rate_index < 256 or not 0 <= self.codec_id < 256:
            raise DomainError("codec id and rate index must fit in one byte")

    def to_bytes(self):
        head = _HEADER.pack(
            MAGIC, self.version, self.codec_id, self.width, self.height,
            self.rate_index, 0, len(self.payload),
        )
        return head + bytes(self.payload)

    @classmethod
    def from_bytes(cls, data):
        data = bytes(data)
        if len(data) < HEADER_SIZE:
            raise FormatError("bitstream shorter than its header")
        magic, version, codec_id, width, height, rate_index, _, length = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported bitstream version {version}")
        payload = data[HEADER_SIZE:]
        if len(payload) != length:
            raise FormatError(f"payload length {len(payload)} != declared {length}")
        return cls(codec_id, width, height, rate_index, payload, version)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def bpp_of(b, width, height, include_header=False):
    """Bits per pixel of ``b``'s payload over a ``width`` x ``height`` image."""
    area = int(width) * int(height)
    if area <= 0:
        raise DomainError("bpp of a zero-area image is undefined")
    nbytes = len(b.payload) + (HEADER_SIZE if include_header else 0)
    return 8.0 * nbytes / area
