"""Shared test helpers and independent oracles.

Oracles here deliberately avoid the package's own compute paths: dense
matrix products for the block transform, scipy convolutions for MS-SSIM,
closed-form entropies, central finite differences for gradients.
"""

import math

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.signal import convolve2d

from stec.media_io import ImageTensor


def smooth_patches(count, size, seed):
    """Band-limited random patches (training-style toy data)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        img = gaussian_filter(
            rng.random((size, size, 1)),
            sigma=(rng.uniform(1.5, 4), rng.uniform(1.5, 4), 0),
        )
        img = (img - img.min()) / max(img.max() - img.min(), 1e-9)
        out.append(ImageTensor(img))
    return out


def easy_patches(count, size, seed):
    """Strongly compressible patches: one Gaussian bump plus a gentle ramp."""
    rng = np.random.default_rng(seed)
    out = []
    yy, xx = np.mgrid[0:size, 0:size] / size
    for _ in range(count):
        cy, cx = rng.uniform(0.2, 0.8, 2)
        amp = rng.uniform(0.4, 1.0)
        w = rng.uniform(0.08, 0.2)
        img = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * w * w))
        img += rng.uniform(0, 0.3) * xx + rng.uniform(0, 0.3) * yy
        out.append(ImageTensor(np.clip(img, 0, 1)[:, :, None]))
    return out


def translating_sequence(n_frames, size, px_per_frame, seed, channels=1):
    """Texture translating horizontally at px_per_frame; frames share one
    underlying image so interpolation has an exact answer."""
    rng = np.random.default_rng(seed)
    width = size + n_frames * px_per_frame
    base = gaussian_filter(rng.random((size, width, channels)), sigma=(2, 2, 0))
    base = (base - base.min()) / (base.max() - base.min())
    frames = [
        ImageTensor(base[:, t * px_per_frame : t * px_per_frame + size, :])
        for t in range(n_frames)
    ]
    return frames


def central_difference(f, x, step=1e-4):
    """Central finite-difference gradient of scalar f at vector x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (f(xp) - f(xm)) / (2 * step)
    return g


def central_difference_at(f, x, coords, step=1e-4):
    """Central differences at selected coordinates only."""
    x = np.asarray(x, dtype=np.float64)
    out = {}
    for i in coords:
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        out[i] = (f(xp) - f(xm)) / (2 * step)
    return out


def block_transform_oracle(samples, weight, bias, block):
    """Dense-matrix analysis oracle: vectorize each block x block x C patch
    (unfold layout: channel-major, then rows, then columns) and multiply."""
    h, w, c = samples.shape
    hh, ww = h // block, w // block
    k = weight.shape[0]
    out = np.zeros((hh, ww, k))
    for i in range(hh):
        for j in range(ww):
            patch = samples[i * block : (i + 1) * block, j * block : (j + 1) * block, :]
            vec = patch.transpose(2, 0, 1).reshape(-1)  # C, then rows, then cols
            out[i, j, :] = weight @ vec + bias
    return out


def histogram_entropy_bits(values):
    """Plug-in Shannon entropy (bits/symbol) of integer samples."""
    _, counts = np.unique(np.asarray(values).ravel(), return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


def discretized_gaussian_entropy(sigma=1.0, span=60):
    """Closed-form entropy (bits) of a rounded N(0, sigma^2) variable."""
    grid = np.arange(-span, span + 1)
    cdf = lambda v: 0.5 * (1 + math.erf(v / (sigma * math.sqrt(2))))
    p = np.array([cdf(v + 0.5) - cdf(v - 0.5) for v in grid])
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


# --- independent MS-SSIM implementation (scipy convolutions) ----------------

_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _gauss_kernel2d(size=11, sigma=1.5):
    coords = np.arange(size) - size // 2
    g = np.exp(-(coords**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def reference_ms_ssim(a, b):
    """MS-SSIM oracle on (H, W, C) arrays in [0, 1]; per-channel average,
    5 scales max, renormalized weights, valid-mode scipy convolutions."""
    win = _gauss_kernel2d()
    c1, c2 = 0.01**2, 0.03**2

    scales = 0
    d = min(a.shape[0], a.shape[1])
    while scales < 5 and d >= 11:
        scales += 1
        d //= 2
    weights = np.array(_WEIGHTS[:scales])
    weights /= weights.sum()

    def channel_stats(x, y):
        mu_x = convolve2d(x, win, mode="valid")
        mu_y = convolve2d(y, win, mode="valid")
        sxx = convolve2d(x * x, win, mode="valid") - mu_x**2
        syy = convolve2d(y * y, win, mode="valid") - mu_y**2
        sxy = convolve2d(x * y, win, mode="valid") - mu_x * mu_y
        cs = (2 * sxy + c2) / (sxx + syy + c2)
        lum = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
        return lum, cs

    def downsample(x):
        h, w = x.shape
        return x[: h - h % 2, : w - w % 2].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))

    total = 1.0
    xs = [a[:, :, c].astype(np.float64) for c in range(a.shape[2])]
    ys = [b[:, :, c].astype(np.float64) for c in range(b.shape[2])]
    for level in range(scales):
        lum_vals, cs_vals = [], []
        for c in range(len(xs)):
            lum, cs = channel_stats(xs[c], ys[c])
            lum_vals.append(lum.mean())
            cs_vals.append(cs.mean())
        if level == scales - 1:
            # final scale uses full SSIM (pool l*cs per pixel, then channels)
            full = []
            for c in range(len(xs)):
                lum, cs = channel_stats(xs[c], ys[c])
                full.append((lum * cs).mean())
            total *= max(np.mean(full), 0.0) ** weights[level]
        else:
            total *= max(np.mean(cs_vals), 0.0) ** weights[level]
            xs = [downsample(x) for x in xs]
            ys = [downsample(y) for y in ys]
    return float(total)
