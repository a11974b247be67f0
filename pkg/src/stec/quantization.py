"""Quantizers: hard rounding for coding, differentiable surrogates for training.

Rounding ties go half-away-from-zero everywhere (bitstream determinism).
Training noise comes from a counter-based generator keyed by
(seed, element index), so results are reproducible and independent of
evaluation order or parallel chunking.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch

from stec.errors import StecError
from stec.transforms import LatentTensor

log = logging.getLogger(__name__)

METHOD_ROUND = "Round"
METHOD_UNIFORM_NOISE = "UniformNoise"
METHOD_SOFT_VECTOR = "SoftVector"
METHOD_STRAIGHT_THROUGH = "StraightThrough"
_METHODS = (METHOD_ROUND, METHOD_UNIFORM_NOISE, METHOD_SOFT_VECTOR, METHOD_STRAIGHT_THROUGH)

DEFAULT_CENTERS = (-32, 31)


@dataclass(frozen=True)
class QuantizerSpec:
    method: str = METHOD_UNIFORM_NOISE
    sigma: float = 1e4
    centers: tuple = DEFAULT_CENTERS

    def __post_init__(self):
        if self.method not in _METHODS:
            raise StecError(f"unknown quantization method {self.method!r}")
        c_min, c_max = self.centers
        if not c_min < c_max:
            raise StecError("centers grid needs c_min < c_max")
        if self.method == METHOD_SOFT_VECTOR and not self.sigma > 0:
            raise StecError("SoftVector needs sigma > 0")

    @property
    def c_min(self):
        return int(self.centers[0])

    @property
    def c_max(self):
        return int(self.centers[1])

    @property
    def alphabet_size(self):
        return self.c_max - self.c_min + 1


_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def counter_uniform(seed, count, offset=0):
    """U(-0.5, 0.5) noise; element i depends only on (seed, offset + i)."""
    idx = np.arange(offset, offset + count, dtype=np.uint64)
    seed_mix = np.uint64((int(seed) * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF)
    z = idx * np.uint64(0xBF58476D1CE4E5B9) + seed_mix
    # splitmix64 finalizer
    z = (z + _GOLDEN) & _M64
    z ^= z >> np.uint64(30)
    z = (z * np.uint64(0xBF58476D1CE4E5B9)) & _M64
    z ^= z >> np.uint64(27)
    z = (z * np.uint64(0x94D049BB133111EB)) & _M64
    z ^= z >> np.uint64(31)
    return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53 - 0.5


def round_half_away(y):
    """Element-wise round with ties away from zero (numpy or torch)."""
    if isinstance(y, torch.Tensor):
        return torch.sign(y) * torch.floor(torch.abs(y) + 0.5)
    y = np.asarray(y)
    return np.sign(y) * np.floor(np.abs(y) + 0.5)


class _STERound(torch.autograd.Function):
    @staticmethod
    def forward(ctx, y):
        return torch.sign(y) * torch.floor(torch.abs(y) + 0.5)

    @staticmethod
    def backward(ctx, grad):
        return grad


def ste_round(y):
    """round(y) in the forward pass, identity gradient in the backward pass."""
    return _STERound.apply(y)


def uniform_noise_quantize(y, seed, offset=0):
    """y + u with u ~ U(-0.5, 0.5) from the counter-based generator."""
    if isinstance(y, torch.Tensor):
        noise = torch.from_numpy(
            counter_uniform(seed, y.numel(), offset).reshape(tuple(y.shape))
        ).to(y.dtype)
        return y + noise
    y = np.asarray(y, dtype=np.float64)
    return y + counter_uniform(seed, y.size, offset).reshape(y.shape)


def soft_quantize(y, sigma, centers=DEFAULT_CENTERS):
    """Convex combination of integer centers weighted by exp(-sigma (y-c)^2)."""
    grid_np = np.arange(centers[0], centers[1] + 1, dtype=np.float64)
    if isinstance(y, torch.Tensor):
        grid = torch.from_numpy(grid_np).to(y.dtype)
        logits = -sigma * (y.unsqueeze(-1) - grid) ** 2
        return (torch.softmax(logits, dim=-1) * grid).sum(-1)
    y = np.asarray(y, dtype=np.float64)
    logits = -sigma * (y[..., None] - grid_np) ** 2
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    return (w * grid_np).sum(axis=-1)


def _apply_train(arr, spec, rng_seed):
    if spec.method == METHOD_UNIFORM_NOISE:
        return uniform_noise_quantize(arr, rng_seed)
    if spec.method == METHOD_SOFT_VECTOR:
        return soft_quantize(arr, spec.sigma, spec.centers)
    if spec.method == METHOD_STRAIGHT_THROUGH:
        return ste_round(arr) if isinstance(arr, torch.Tensor) else round_half_away(arr)
    return round_half_away(arr)


def quantize_train(y, spec, rng_seed=0):
    """Train-time quantization surrogate. Accepts LatentTensor, ndarray or
    torch tensor and returns the same kind."""
    if isinstance(y, LatentTensor):
        return LatentTensor(_apply_train(y.samples, spec, rng_seed))
    return _apply_train(y, spec, rng_seed)


def quantize_test(y, spec=QuantizerSpec()):
    """Hard quantization for coding: round half-away-from-zero, then clamp
    into the centers grid. Idempotent."""
    arr = y.samples if isinstance(y, LatentTensor) else np.asarray(y, dtype=np.float64)
    q = round_half_away(arr)
    n_out = int(np.count_nonzero((q < spec.c_min) | (q > spec.c_max)))
    if n_out:
        log.warning(
            "%d latent values outside centers grid [%d, %d]; clamped",
            n_out,
            spec.c_min,
            spec.c_max,
        )
        q = np.clip(q, spec.c_min, spec.c_max)
    if isinstance(y, LatentTensor):
        return LatentTensor(q)
    return q
