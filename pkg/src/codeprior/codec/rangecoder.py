"""Integer arithmetic coder over per-symbol frequency tables.

32-bit interval arithmetic with deferred (pending) bits.  Frequencies are
integer tables summing to ``1 << PRECISION``; every coded symbol must have a
nonzero frequency.
"""

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
_BITS = 32
_FULL = (1 << _BITS) - 1
_HALF = 1 << (_BITS - 1)
_QUARTER = 1 << (_BITS - 2)


def quantize_pmf(pmf, precision=PRECISION):
    """Turn a probability vector into integer frequencies (each >= 1)."""
    pmf = np.asarray(pmf, dtype=np.float64)
    total = 1 << precision
    n = pmf.size
    if n > total:
        raise ValueError("alphabet larger than frequency precision")
    pmf = np.clip(pmf, 0.0, None)
    pmf = pmf / pmf.sum()
    freq = np.maximum(1, np.floor(pmf * (total - n)).astype(np.int64) + 1)
    # distribute the remainder to the largest entries, deterministically
    diff = total - int(freq.sum())
    order = np.argsort(-pmf, kind="stable")
    i = 0
    while diff != 0:
        j = order[i % n]
        if diff > 0:
            freq[j] += 1
            diff -= 1
        elif freq[j] > 1:
            freq[j] -= 1
            diff += 1
        i += 1
    return freq


def cdf_from_freq(freq):
    cdf = np.zeros(len(freq) + 1, dtype=np.int64)
    np.cumsum(freq, out=cdf[1:])
    return cdf


class _BitWriter:
    def __init__(self):
        self.bits = []
        self.pending = 0

    def emit(self, bit):
        self.bits.append(bit)
        self.bits.extend([1 - bit] * self.pending)
        self.pending = 0

    def to_bytes(self):
        return np.packbits(np.asarray(self.bits, dtype=np.uint8)).tobytes()


def encode(symbols, cdf_index, cdfs):
    """Encode ``symbols[i]`` with table ``cdfs[cdf_index[i]]``."""
    low, high = 0, _FULL
    out = _BitWriter()
    for s, k in zip(symbols, cdf_index):
        cdf = cdfs[k]
        lo, hi = int(cdf[s]), int(cdf[s + 1])
        if hi <= lo:
            raise ValueError(f"symbol {s} has zero frequency")
        span = high - low + 1
        high = low + span * hi // TOTAL - 1
        low = low + span * lo // TOTAL
        while True:
            if high < _HALF:
                out.emit(0)
            elif low >= _HALF:
                out.emit(1)
                low -= _HALF
                high -= _HALF
            elif low >= _QUARTER and high < 3 * _QUARTER:
                out.pending += 1
                low -= _QUARTER
                high -= _QUARTER
            else:
                break
            low = 2 * low
            high = 2 * high + 1
    out.pending += 1
    out.emit(0 if low < _QUARTER else 1)
    return out.to_bytes()


def decode(data, cdf_index, cdfs):
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8)).tolist()
    nbits = len(bits)
    pos = 0

    def next_bit():
        nonlocal pos
        b = bits[pos] if pos < nbits else 0
        pos += 1
        return b

    value = 0
    for _ in range(_BITS):
        value = (value << 1) | next_bit()
    low, high = 0, _FULL
    out = np.empty(len(cdf_index), dtype=np.int64)
    for i, k in enumerate(cdf_index):
        cdf = cdfs[k]
        span = high - low + 1
        scaled = ((value - low + 1) * TOTAL - 1) // span
        s = int(np.searchsorted(cdf, scaled, side="right")) - 1
        if not 0 <= s < len(cdf) - 1:
            raise ValueError("corrupt arithmetic-coded payload")
        out[i] = s
        lo, hi = int(cdf[s]), int(cdf[s + 1])
        high = low + span * hi // TOTAL - 1
        low = low + span * lo // TOTAL
        while True:
            if high < _HALF:
                pass
            elif low >= _HALF:
                low -= _HALF
                high -= _HALF
                value -= _HALF
            elif low >= _QUARTER and high < 3 * _QUARTER:
                low -= _QUARTER
                high -= _QUARTER
                value -= _QUARTER
            else:
                break
            low = 2 * low
            high = 2 * high + 1
            value = 2 * value + next_bit()
    # a complete stream ends with two flush bits, so the decoder's lookahead
    # never runs more than _BITS - 2 bits past the data
    if pos > nbits + _BITS - 2:
        raise ValueError("corrupt arithmetic-coded payload: truncated")
    return out
