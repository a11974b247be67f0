#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-Python fallback.

Covers the two hot loops: range coding (symbol-sequential, dominates
encode/decode) and block-matching motion search. Both backends produce
byte-identical results; this script reports throughput only.

Run:  python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from stec._kernels import get_backend


def _tables(v, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(v) * 0.4)
    scaled = p * (65536 - v)
    f = np.floor(scaled).astype(np.int64) + 1
    rem = 65536 - int(f.sum())
    order = np.argsort(-(scaled - np.floor(scaled)), kind="stable")
    f[order[:rem]] += 1
    cum = np.zeros((1, v + 1), dtype=np.uint32)
    cum[0, 1:] = np.cumsum(f)
    return cum, p


def bench_coder(n_symbols=200_000, alphabet=64, seed=0):
    cum, p = _tables(alphabet, seed)
    rng = np.random.default_rng(seed + 1)
    syms = rng.choice(alphabet, size=n_symbols, p=p).astype(np.int32)
    chans = np.zeros(n_symbols, dtype=np.int32)
    rows = []
    payloads = {}
    for name in ("cython", "python"):
        try:
            impl = get_backend(name)
        except ImportError:
            print(f"  [{name} backend unavailable]")
            continue
        t0 = time.perf_counter()
        payload = impl.rc_encode(syms, chans, cum)
        t1 = time.perf_counter()
        decoded = impl.rc_decode(payload, chans, cum, n_symbols)
        t2 = time.perf_counter()
        assert np.array_equal(decoded, syms)
        payloads[name] = payload
        rows.append((name, n_symbols / (t1 - t0) / 1e6, n_symbols / (t2 - t1) / 1e6))
    if len(payloads) == 2:
        assert payloads["cython"] == payloads["python"], "backends disagree!"
    print(f"range coder ({n_symbols} symbols, alphabet {alphabet}):")
    for name, enc, dec in rows:
        print(f"  {name:>7}: encode {enc:7.3f} Msym/s   decode {dec:7.3f} Msym/s")
    return rows


def bench_mc(h=96, w=96, block=8, search=8, seed=0):
    rng = np.random.default_rng(seed)
    left = (rng.random((h, w, 1)) * 255).astype(np.int32)
    right = np.roll(left, (2, -3), axis=(0, 1))
    rows = []
    results = {}
    for name in ("cython", "python"):
        try:
            impl = get_backend(name)
        except ImportError:
            continue
        t0 = time.perf_counter()
        vec = impl.mc_search(left, right, block, search)
        t1 = time.perf_counter()
        results[name] = vec
        rows.append((name, t1 - t0))
    if len(results) == 2:
        assert np.array_equal(results["cython"], results["python"]), "backends disagree!"
    print(f"block matching ({h}x{w}, block {block}, search +-{search}):")
    for name, dt in rows:
        print(f"  {name:>7}: {dt * 1e3:8.2f} ms/frame")
    return rows


if __name__ == "__main__":
    coder_rows = bench_coder()
    mc_rows = bench_mc()
    if len(coder_rows) == 2:
        speedup = coder_rows[0][1] / coder_rows[1][1]
        print(f"\ncython/python encode speedup: {speedup:.0f}x")
