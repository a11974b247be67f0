"""Pure-Python kernels: range coder and block-matching search.

Bit-identical twin of the Cython extension (``stec._kernels._core``).
All coder state arithmetic is masked to fixed widths so byte output
matches the compiled implementation exactly.
"""

import numpy as np

from stec.errors import RangeCoderError

BACKEND = "python"

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
_TOTAL_BITS = 16
_TOTAL = 1 << _TOTAL_BITS


def rc_encode(symbols, channel_ids, cum):
    """Range-encode ``symbols`` (alphabet indices) against per-channel
    cumulative frequency tables ``cum`` with total 2**16 per row.
    """
    symbols = np.ascontiguousarray(symbols, dtype=np.int32)
    channel_ids = np.ascontiguousarray(channel_ids, dtype=np.int32)
    cum = np.ascontiguousarray(cum, dtype=np.uint32)
    n = symbols.shape[0]
    nsym = cum.shape[1] - 1

    low = 0
    rng = _MASK32
    cache = 0
    cache_size = 1
    out = bytearray()

    def shift_low():
        nonlocal low, cache, cache_size
        if low < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            if cache_size:
                out.append((cache + carry) & 0xFF)
                for _ in range(cache_size - 1):
                    out.append((0xFF + carry) & 0xFF)
            cache = (low >> 24) & 0xFF
            cache_size = 0
        cache_size += 1
        low = (low << 8) & _MASK32

    for i in range(n):
        s = symbols[i]
        if s < 0 or s >= nsym:
            raise RangeCoderError(f"symbol {s} outside alphabet of size {nsym}")
        row = cum[channel_ids[i]]
        cum_lo = int(row[s])
        freq = int(row[s + 1]) - cum_lo
        r = rng >> _TOTAL_BITS
        low += r * cum_lo
        rng = r * freq
        while rng < _TOP:
            shift_low()
            rng = (rng << 8) & _MASK32

    for _ in range(5):
        shift_low()
    return bytes(out)


def rc_decode(payload, channel_ids, cum, count):
    """Decode ``count`` symbols from ``payload``. Raises RangeCoderError on
    truncated input."""
    channel_ids = np.ascontiguousarray(channel_ids, dtype=np.int32)
    cum = np.ascontiguousarray(cum, dtype=np.uint32)
    out = np.empty(count, dtype=np.int32)
    nsym = cum.shape[1] - 1

    pos = 0
    nbytes = len(payload)

    def next_byte():
        nonlocal pos
        if pos >= nbytes:
            raise RangeCoderError("payload truncated")
        b = payload[pos]
        pos += 1
        return b

    code = 0
    next_byte()  # leading cache byte, always written by the encoder
    for _ in range(4):
        code = ((code << 8) | next_byte()) & _MASK32
    rng = _MASK32

    for i in range(count):
        row = cum[channel_ids[i]]
        r = rng >> _TOTAL_BITS
        val = code // r
        if val >= _TOTAL:
            val = _TOTAL - 1
        lo, hi = 0, nsym
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if row[mid] <= val:
                lo = mid
            else:
                hi = mid
        s = lo
        cum_lo = int(row[s])
        freq = int(row[s + 1]) - cum_lo
        code -= r * cum_lo
        rng = r * freq
        if code < 0 or code > rng:
            raise RangeCoderError("corrupt payload: decoder state out of range")
        while rng < _TOP:
            code = ((code << 8) | next_byte()) & _MASK32
            rng = (rng << 8) & _MASK32
        out[i] = s
    return out


def mc_search(left_q, right_q, block_size, search_range):
    """Mirror-symmetric block-matching search between two reference frames.

    ``left_q``/``right_q`` are integer (H, W, C) arrays. For each block of
    the (virtual) middle frame, finds the displacement d minimising the SAD
    between left shifted by +d and right shifted by -d. Ties keep the first
    candidate in (dy, dx) scan order. Returns int32 vectors of shape
    (nby, nbx, 2) holding (dy, dx) per block.
    """
    h, w, _ = left_q.shape
    nby = (h + block_size - 1) // block_size
    nbx = (w + block_size - 1) // block_size
    vectors = np.zeros((nby, nbx, 2), dtype=np.int32)

    ys = np.arange(h)
    xs = np.arange(w)
    for by in range(nby):
        y0 = by * block_size
        y1 = min(y0 + block_size, h)
        for bx in range(nbx):
            x0 = bx * block_size
            x1 = min(x0 + block_size, w)
            best = None
            best_d = (0, 0)
            for dy in range(-search_range, search_range + 1):
                yl = np.clip(ys[y0:y1] + dy, 0, h - 1)
                yr = np.clip(ys[y0:y1] - dy, 0, h - 1)
                for dx in range(-search_range, search_range + 1):
                    xl = np.clip(xs[x0:x1] + dx, 0, w - 1)
                    xr = np.clip(xs[x0:x1] - dx, 0, w - 1)
                    a = left_q[np.ix_(yl, xl)]
                    b = right_q[np.ix_(yr, xr)]
                    sad = int(np.abs(a - b).sum())
                    if best is None or sad < best:
                        best = sad
                        best_d = (dy, dx)
            vectors[by, bx, 0] = best_d[0]
            vectors[by, bx, 1] = best_d[1]
    return vectors
