"""Quality metrics: MS-SSIM (differentiable), PSNR, decibel conversion,
and rate-distortion bookkeeping.

Constants follow the standard multiscale formulation: 5 scales with
weights (0.0448, 0.2856, 0.3001, 0.2363, 0.1333), an 11x11 Gaussian
window with sigma 1.5, and stability constants K1=0.01, K2=0.03 on unit
dynamic range. Images whose minimum dimension cannot support 5 scales use
fewer scales with renormalized weights. Color images average the metric
over channels.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from stec.errors import StecError
from stec.media_io import ImageTensor
from stec.transforms import to_torch

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03
DB_CAP = 100.0

DISTORTION_MSSSIM = "MS-SSIM"
DISTORTION_MSE = "MSE"


@dataclass
class RdPoint:
    """One point on a rate-distortion curve."""

    bpp: float
    ms_ssim: float
    ms_ssim_db: float
    psnr: float
    label: str = ""

    def __post_init__(self):
        if self.bpp < 0:
            raise StecError("bpp must be >= 0")
        if not 0.0 <= self.ms_ssim <= 1.0:
            raise StecError("ms_ssim must lie in [0, 1]")

    def csv_row(self):
        return f"{self.label},{self.bpp:.6f},{self.ms_ssim:.6f},{self.ms_ssim_db:.4f},{self.psnr:.4f}"

    @staticmethod
    def csv_header():
        return "label,bpp,ms_ssim,ms_ssim_db,psnr"


def _gauss_window(dtype=torch.float64):
    coords = torch.arange(WINDOW_SIZE, dtype=dtype) - WINDOW_SIZE // 2
    g = torch.exp(-(coords**2) / (2 * WINDOW_SIGMA**2))
    g = g / g.sum()
    return g


def _blur(x, win1d):
    c = x.shape[1]
    w = win1d.reshape(1, 1, 1, -1).repeat(c, 1, 1, 1)
    x = F.conv2d(x, w, groups=c)
    x = F.conv2d(x, w.transpose(2, 3), groups=c)
    return x


def usable_scales(height, width):
    """How many of the 5 scales fit: each halving must keep the window inside."""
    m = 0
    d = min(height, width)
    while m < len(MSSSIM_WEIGHTS) and d >= WINDOW_SIZE:
        m += 1
        d //= 2
    return m


def ms_ssim_tensor(x, y):
    """Differentiable MS-SSIM on (B, C, H, W) tensors with samples in [0, 1]."""
    if x.shape != y.shape:
        raise StecError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    scales = usable_scales(x.shape[2], x.shape[3])
    if scales == 0:
        raise StecError(f"image {x.shape[2]}x{x.shape[3]} smaller than the {WINDOW_SIZE}px window")
    weights = torch.tensor(MSSSIM_WEIGHTS[:scales], dtype=x.dtype)
    weights = weights / weights.sum()

    win = _gauss_window(x.dtype)
    c1 = K1 * K1
    c2 = K2 * K2
    mcs = []
    for level in range(scales):
        mu_x = _blur(x, win)
        mu_y = _blur(y, win)
        mu_xx = mu_x * mu_x
        mu_yy = mu_y * mu_y
        mu_xy = mu_x * mu_y
        sigma_x = _blur(x * x, win) - mu_xx
        sigma_y = _blur(y * y, win) - mu_yy
        sigma_xy = _blur(x * y, win) - mu_xy
        cs = (2 * sigma_xy + c2) / (sigma_x + sigma_y + c2)
        if level == scales - 1:
            lum = (2 * mu_xy + c1) / (mu_xx + mu_yy + c1)
            ssim = (lum * cs).mean()
            mcs.append(torch.relu(ssim))
        else:
            mcs.append(torch.relu(cs.mean()))
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
    out = torch.ones((), dtype=weights.dtype)
    for v, w in zip(mcs, weights):
        out = out * v**w
    return out


def _pair_tensors(x, x_hat):
    a = to_torch(x.samples).permute(2, 0, 1)[None]
    b = to_torch(x_hat.samples).permute(2, 0, 1)[None]
    return a, b


def ms_ssim(x, x_hat):
    """MS-SSIM between two images; 1.0 iff identical. Symmetric."""
    a, b = _pair_tensors(x, x_hat)
    with torch.no_grad():
        return float(ms_ssim_tensor(a, b))


def mse(x, x_hat):
    if x.samples.shape != x_hat.samples.shape:
        raise StecError("dimension mismatch")
    diff = x.samples - x_hat.samples
    return float(np.mean(diff * diff))


def distortion(x, x_hat, kind=DISTORTION_MSSSIM):
    """Training/eval distortion: 1 - MS-SSIM, or plain MSE in [0,1] domain."""
    if kind == DISTORTION_MSSSIM:
        return 1.0 - ms_ssim(x, x_hat)
    if kind == DISTORTION_MSE:
        return mse(x, x_hat)
    raise StecError(f"unknown distortion kind {kind!r}")


def msssim_to_db(s):
    """-10 log10(1 - s), capped at 100 dB for s == 1."""
    if not 0.0 <= s <= 1.0:
        raise StecError("MS-SSIM must lie in [0, 1]")
    if s >= 1.0 - 10.0 ** (-DB_CAP / 10.0):
        return DB_CAP
    return -10.0 * math.log10(1.0 - s)


def psnr(x, x_hat):
    """10 log10(1/MSE) on unit dynamic range, capped at 100 dB."""
    err = mse(x, x_hat)
    if err <= 10.0 ** (-DB_CAP / 10.0):
        return DB_CAP
    return 10.0 * math.log10(1.0 / err)


def rd_point(x, x_hat, payload_bits, label=""):
    """Assemble an RdPoint; bpp uses the original pixel count H*W."""
    s = ms_ssim(x, x_hat)
    return RdPoint(
        bpp=payload_bits / (x.height * x.width),
        ms_ssim=s,
        ms_ssim_db=msssim_to_db(s),
        psnr=psnr(x, x_hat),
        label=label,
    )
