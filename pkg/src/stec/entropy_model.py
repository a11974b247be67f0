"""Fully factorized entropy model and its bit-exact coding tables.

Each latent channel gets an independent monotone CDF built from a short
chain of positivity-constrained affine stages with tanh gating, squashed
by a final sigmoid and renormalized over the integer support. The same
model drives three things:

* differentiable rate estimates during training,
* 16-bit cumulative frequency tables for the range coder,
* the payload itself (through :func:`range_encode`/:func:`range_decode`).
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from stec import _kernels
from stec.errors import StecError
from stec.quantization import DEFAULT_CENTERS
from stec.transforms import LatentTensor, _load_vector, _named_views, _pack, to_torch

TABLE_TOTAL = 1 << 16
LIKELIHOOD_FLOOR = 1e-12


class FactorizedModel(nn.Module):
    """Per-channel monotone CDF with trainable parameters.

    support covers the quantizer centers grid; the renormalized CDF is
    exactly 0 at (c_min - 0.5) and exactly 1 at (c_max + 0.5).
    """

    def __init__(self, channels, support=DEFAULT_CENTERS, widths=(3, 3, 3), seed=0,
                 init_scale=10.0, lr=0.02, dtype=torch.float64):
        super().__init__()
        self.channels = channels
        self.c_min, self.c_max = int(support[0]), int(support[1])
        if not self.c_min < self.c_max:
            raise StecError("support needs c_min < c_max")
        self.widths = tuple(int(w) for w in widths)
        self.lr = lr
        self.dtype = dtype
        dims = (1,) + self.widths + (1,)
        rng = np.random.default_rng(seed)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self._matrices = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            raw = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            m = torch.full((channels, dims[i + 1], dims[i]), raw, dtype=torch.float64)
            self._matrices.append(nn.Parameter(m))
            b = rng.uniform(-0.5, 0.5, size=(channels, dims[i + 1], 1))
            self._biases.append(nn.Parameter(torch.from_numpy(b)))
            if i < len(dims) - 2:
                f = torch.zeros(channels, dims[i + 1], 1, dtype=torch.float64)
                self._factors.append(nn.Parameter(f))
        self.to(dtype)
        self._opt = None

    @property
    def support(self):
        return (self.c_min - 0.5, self.c_max + 0.5)

    @property
    def alphabet_size(self):
        return self.c_max - self.c_min + 1

    def _logits(self, x):
        """Monotone pre-sigmoid chain; x shaped (C, 1, N)."""
        v = x
        last = len(self._matrices) - 1
        for i, (m, b) in enumerate(zip(self._matrices, self._biases)):
            v = torch.einsum("coi,cin->con", torch.nn.functional.softplus(m), v) + b
            if i < last:
                v = v + torch.tanh(self._factors[i]) * torch.tanh(v)
        return v

    def raw_cdf(self, x):
        return torch.sigmoid(self._logits(x))

    def cdf(self, x):
        """Renormalized CDF over the support, per channel; x shaped (C, 1, N)."""
        lo, hi = self.support
        edges = torch.tensor([[[lo, hi]]], dtype=x.dtype).expand(self.channels, 1, 2)
        ce = self.raw_cdf(edges)
        c = self.raw_cdf(x)
        out = (c - ce[:, :, :1]) / (ce[:, :, 1:] - ce[:, :, :1])
        return torch.clamp(out, 0.0, 1.0)

    def likelihood(self, values):
        """P(round to v) = cdf(v + 0.5) - cdf(v - 0.5); values shaped (C, N)."""
        x = values.unsqueeze(1)
        p = self.cdf(x + 0.5) - self.cdf(x - 0.5)
        return torch.clamp(p, min=LIKELIHOOD_FLOOR).squeeze(1)

    def forward(self, y):
        """Total estimated bits; accepts (C, N), (B, C, H, W) or (h, w, C)."""
        return (-torch.log2(self.likelihood(self._channel_major(y)))).sum()

    def rate_bits(self, y):
        return self.forward(y)

    def rate_bits_with(self, entropy_vec, y):
        """rate_bits through an external flat parameter tensor (autograd view)."""
        views = _named_views(self, entropy_vec)
        return torch.func.functional_call(self, views, (y,))

    def _channel_major(self, y):
        if y.ndim == 2 and y.shape[0] == self.channels:
            return y
        if y.ndim == 4 and y.shape[1] == self.channels:
            return y.permute(1, 0, 2, 3).reshape(self.channels, -1)
        if y.ndim == 3 and y.shape[2] == self.channels:  # (h, w, K) latent layout
            return y.permute(2, 0, 1).reshape(self.channels, -1)
        raise StecError(f"cannot map tensor of shape {tuple(y.shape)} to {self.channels} channels")

    def fit_step(self, y):
        """One Adam step on the mean estimated rate; returns bits/symbol."""
        if self._opt is None:
            self._opt = torch.optim.Adam(self.parameters(), lr=self.lr)
        self._opt.zero_grad()
        vals = self._channel_major(y)
        loss = (-torch.log2(self.likelihood(vals))).mean()
        loss.backward()
        self._opt.step()
        return float(loss.detach())

    def param_vector(self):
        return _pack(self)

    def load_param_vector(self, vec):
        _load_vector(self, vec)
        self._opt = None


def make_model(cfg, seed=0, support=DEFAULT_CENTERS):
    """FactorizedModel matching an ArchitectureConfig (K channels, config widths)."""
    return FactorizedModel(cfg.K, support=support, widths=cfg.entropy_widths, seed=seed)


def _values_array(y):
    if isinstance(y, LatentTensor):
        return y.samples
    if isinstance(y, torch.Tensor):
        return y.detach().cpu().numpy()
    return np.asarray(y, dtype=np.float64)


def estimate_rate(y, model):
    """Total estimated bits for latent values under the model.

    Raises if any value lies outside the model support. For a torch input
    the differentiable graph is preserved and a torch scalar is returned.
    """
    arr = _values_array(y)
    lo, hi = model.support
    if arr.size and (arr.min() < lo or arr.max() > hi):
        raise StecError(f"values outside model support [{lo}, {hi}]")
    if isinstance(y, torch.Tensor):
        return model.rate_bits(y)
    t = to_torch(arr)
    if arr.ndim == 1 and model.channels == 1:
        t = t.reshape(1, -1)
    with torch.no_grad():
        bits = model.rate_bits(t)
    return float(bits)


def fit_model_step(model, batch):
    """One optimizer step on a batch (LatentTensor, ndarray or torch tensor).
    Returns the pre-step bits/symbol estimate."""
    arr = _values_array(batch)
    if arr.ndim == 3:
        t = to_torch(arr)
    elif arr.ndim == 2 and arr.shape[0] == model.channels:
        t = to_torch(arr)
    elif model.channels == 1:
        t = to_torch(arr.reshape(1, -1))
    else:
        raise StecError(f"cannot map batch of shape {arr.shape} to model channels")
    return model.fit_step(t)


# ---------------------------------------------------------------------------
# Coding tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CdfTable:
    """Integer cumulative frequencies for one channel; total exactly 2^16."""

    channel: int
    cum: np.ndarray  # uint32, length alphabet+1, cum[0] == 0

    def __post_init__(self):
        cum = np.ascontiguousarray(self.cum, dtype=np.uint32)
        if cum[0] != 0 or cum[-1] != TABLE_TOTAL:
            raise StecError("cumulative table must span [0, 2^16]")
        if np.any(np.diff(cum.astype(np.int64)) < 1):
            raise StecError("every symbol needs frequency >= 1")
        cum.setflags(write=False)
        object.__setattr__(self, "cum", cum)

    @property
    def frequencies(self):
        return np.diff(self.cum.astype(np.int64))


def _model_probabilities(model):
    """Per-channel symbol probabilities evaluated in plain numpy float64.

    Kept free of BLAS-order effects so the coding tables are byte-identical
    across machines for the same model bytes.
    """
    c_min, c_max = model.c_min, model.c_max
    grid = np.arange(c_min, c_max + 1, dtype=np.float64)
    points = np.concatenate([grid - 0.5, [c_max + 0.5]])  # V+1 edges
    mats = [torch.nn.functional.softplus(m).detach().numpy() for m in model._matrices]
    biases = [b.detach().numpy() for b in model._biases]
    factors = [np.tanh(f.detach().numpy()) for f in model._factors]

    v = np.broadcast_to(points[None, None, :], (model.channels, 1, points.size)).copy()
    last = len(mats) - 1
    for i, (m, b) in enumerate(zip(mats, biases)):
        v = np.einsum("coi,cin->con", m, v, optimize=False) + b
        if i < last:
            v = v + factors[i] * np.tanh(v)
    raw = 1.0 / (1.0 + np.exp(-v[:, 0, :]))  # (C, V+1)
    lo = raw[:, :1]
    hi = raw[:, -1:]
    cdf = np.clip((raw - lo) / (hi - lo), 0.0, 1.0)
    p = np.diff(cdf, axis=1)
    return np.maximum(p, 0.0)


def _quantize_row(p):
    """Deterministic 16-bit quantization; every symbol gets frequency >= 1."""
    v = p.size
    total = TABLE_TOTAL - v
    s = p.sum()
    scaled = (p / s) * total if s > 0 else np.full(v, total / v)
    f = np.floor(scaled).astype(np.int64) + 1
    rem = TABLE_TOTAL - int(f.sum())
    if rem > 0:
        frac = scaled - np.floor(scaled)
        order = np.argsort(-frac, kind="stable")
        f[order[:rem]] += 1
    cum = np.zeros(v + 1, dtype=np.uint32)
    cum[1:] = np.cumsum(f, dtype=np.int64)
    return cum


def build_cdf_tables(model):
    """Coding tables for every channel, rebuilt identically by both sides."""
    probs = _model_probabilities(model)
    return [CdfTable(k, _quantize_row(probs[k])) for k in range(model.channels)]


def tables_matrix(tables):
    return np.ascontiguousarray(np.stack([t.cum for t in tables]), dtype=np.uint32)


def table_entropy_bits(table):
    """Shannon entropy (bits/symbol) of one quantized table."""
    f = table.frequencies.astype(np.float64) / TABLE_TOTAL
    return float(-(f * np.log2(f)).sum())


def _symbols_and_channels(symbols, n_tables):
    arr = np.asarray(symbols)
    if arr.ndim == 3:
        chans = np.tile(np.arange(arr.shape[2], dtype=np.int32), arr.shape[0] * arr.shape[1])
        return arr.reshape(-1).astype(np.int32), chans
    flat = arr.reshape(-1).astype(np.int32)
    if n_tables == 1:
        return flat, np.zeros(flat.size, dtype=np.int32)
    raise StecError("1-D symbol streams need a single table; pass (h, w, K) otherwise")


def range_encode(symbols, tables):
    """Symbols (alphabet indices) -> payload bytes. (h, w, K) arrays map the
    last axis onto per-channel tables; 1-D arrays use a single table."""
    mat = tables_matrix(tables)
    flat, chans = _symbols_and_channels(symbols, len(tables))
    return _kernels.rc_encode(flat, chans, mat)


def range_decode(payload, tables, count, shape=None):
    """Decode ``count`` symbols; with ``shape`` (h, w, K) restores the latent
    layout used by :func:`range_encode`."""
    mat = tables_matrix(tables)
    if shape is not None:
        h, w, k = shape
        chans = np.tile(np.arange(k, dtype=np.int32), h * w)
        out = _kernels.rc_decode(payload, chans, mat, count)
        return out.reshape(h, w, k)
    chans = np.zeros(count, dtype=np.int32)
    if len(tables) != 1:
        raise StecError("1-D decode needs a single table; pass shape otherwise")
    return _kernels.rc_decode(payload, chans, mat, count)
