# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: range coder and block-matching search.

Byte-for-byte identical to the pure-Python twin in ``_pure.py``.
"""

from libc.stdlib cimport llabs

import numpy as np
cimport numpy as cnp

from stec.errors import RangeCoderError

cnp.import_array()

BACKEND = "cython"

DEF TOP = 16777216          # 1 << 24
DEF TOTAL_BITS = 16
DEF TOTAL = 65536           # 1 << 16
cdef unsigned long long MASK32 = 0xFFFFFFFFULL


def rc_encode(symbols, channel_ids, cum):
    cdef cnp.ndarray[cnp.int32_t, ndim=1] syms = np.ascontiguousarray(symbols, dtype=np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] chans = np.ascontiguousarray(channel_ids, dtype=np.int32)
    cdef cnp.ndarray[cnp.uint32_t, ndim=2] tbl = np.ascontiguousarray(cum, dtype=np.uint32)
    cdef Py_ssize_t n = syms.shape[0]
    cdef int nsym = tbl.shape[1] - 1

    cdef unsigned long long low = 0
    cdef unsigned long long rng = MASK32
    cdef unsigned long long cache = 0
    cdef unsigned long long carry
    cdef int cache_size = 1
    cdef bytearray out = bytearray()

    cdef Py_ssize_t i
    cdef int s, j
    cdef unsigned long long cum_lo, freq, r

    for i in range(n):
        s = syms[i]
        if s < 0 or s >= nsym:
            raise RangeCoderError(f"symbol {s} outside alphabet of size {nsym}")
        cum_lo = tbl[chans[i], s]
        freq = tbl[chans[i], s + 1] - cum_lo
        r = rng >> TOTAL_BITS
        low += r * cum_lo
        rng = r * freq
        while rng < TOP:
            # shift_low
            if low < 0xFF000000ULL or low > MASK32:
                carry = low >> 32
                if cache_size:
                    out.append(<unsigned char>((cache + carry) & 0xFF))
                    for j in range(cache_size - 1):
                        out.append(<unsigned char>((0xFF + carry) & 0xFF))
                cache = (low >> 24) & 0xFF
                cache_size = 0
            cache_size += 1
            low = (low << 8) & MASK32
            rng = (rng << 8) & MASK32

    for _ in range(5):
        if low < 0xFF000000ULL or low > MASK32:
            carry = low >> 32
            if cache_size:
                out.append(<unsigned char>((cache + carry) & 0xFF))
                for j in range(cache_size - 1):
                    out.append(<unsigned char>((0xFF + carry) & 0xFF))
            cache = (low >> 24) & 0xFF
            cache_size = 0
        cache_size += 1
        low = (low << 8) & MASK32
    return bytes(out)


def rc_decode(payload, channel_ids, cum, count):
    cdef const unsigned char[::1] data = payload
    cdef cnp.ndarray[cnp.int32_t, ndim=1] chans = np.ascontiguousarray(channel_ids, dtype=np.int32)
    cdef cnp.ndarray[cnp.uint32_t, ndim=2] tbl = np.ascontiguousarray(cum, dtype=np.uint32)
    cdef Py_ssize_t n = count
    cdef cnp.ndarray[cnp.int32_t, ndim=1] out = np.empty(count, dtype=np.int32)
    cdef int nsym = tbl.shape[1] - 1

    cdef Py_ssize_t pos = 0
    cdef Py_ssize_t nbytes = data.shape[0]
    cdef unsigned long long code = 0
    cdef unsigned long long rng = MASK32
    cdef unsigned long long r, val, cum_lo, freq
    cdef int lo, hi, mid, s
    cdef Py_ssize_t i
    cdef int k

    if nbytes < 5:
        raise RangeCoderError("payload truncated")
    pos = 1  # leading cache byte
    for k in range(4):
        code = ((code << 8) | data[pos]) & MASK32
        pos += 1

    for i in range(n):
        r = rng >> TOTAL_BITS
        val = code / r
        if val >= TOTAL:
            val = TOTAL - 1
        lo = 0
        hi = nsym
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if tbl[chans[i], mid] <= val:
                lo = mid
            else:
                hi = mid
        s = lo
        cum_lo = tbl[chans[i], s]
        freq = tbl[chans[i], s + 1] - cum_lo
        code -= r * cum_lo
        rng = r * freq
        if code > rng:
            raise RangeCoderError("corrupt payload: decoder state out of range")
        while rng < TOP:
            if pos >= nbytes:
                raise RangeCoderError("payload truncated")
            code = ((code << 8) | data[pos]) & MASK32
            pos += 1
            rng = (rng << 8) & MASK32
        out[i] = s
    return out


def mc_search(left_q, right_q, int block_size, int search_range):
    cdef cnp.ndarray[cnp.int32_t, ndim=3] lq = np.ascontiguousarray(left_q, dtype=np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=3] rq = np.ascontiguousarray(right_q, dtype=np.int32)
    cdef int h = lq.shape[0]
    cdef int w = lq.shape[1]
    cdef int c = lq.shape[2]
    cdef int nby = (h + block_size - 1) // block_size
    cdef int nbx = (w + block_size - 1) // block_size
    cdef cnp.ndarray[cnp.int32_t, ndim=3] vectors = np.zeros((nby, nbx, 2), dtype=np.int32)

    cdef int by, bx, y0, y1, x0, x1, dy, dx, y, x, ch
    cdef int yl, yr, xl, xr
    cdef long long sad, best
    cdef int best_dy, best_dx
    cdef bint have_best

    for by in range(nby):
        y0 = by * block_size
        y1 = y0 + block_size
        if y1 > h:
            y1 = h
        for bx in range(nbx):
            x0 = bx * block_size
            x1 = x0 + block_size
            if x1 > w:
                x1 = w
            have_best = False
            best = 0
            best_dy = 0
            best_dx = 0
            for dy in range(-search_range, search_range + 1):
                for dx in range(-search_range, search_range + 1):
                    sad = 0
                    for y in range(y0, y1):
                        yl = y + dy
                        if yl < 0: yl = 0
                        elif yl >= h: yl = h - 1
                        yr = y - dy
                        if yr < 0: yr = 0
                        elif yr >= h: yr = h - 1
                        for x in range(x0, x1):
                            xl = x + dx
                            if xl < 0: xl = 0
                            elif xl >= w: xl = w - 1
                            xr = x - dx
                            if xr < 0: xr = 0
                            elif xr >= w: xr = w - 1
                            for ch in range(c):
                                sad += llabs(<long long>lq[yl, xl, ch] - <long long>rq[yr, xr, ch])
                    if not have_best or sad < best:
                        have_best = True
                        best = sad
                        best_dy = dy
                        best_dx = dx
            vectors[by, bx, 0] = best_dy
            vectors[by, bx, 1] = best_dx
    return vectors
