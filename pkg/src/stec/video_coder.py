"""Temporal layer: entropy-driven GOP sizing, hierarchical interpolation,
and residual coding through the image codec.

The encoder runs a local interpolation loop: every reference it predicts
from is its own decoded output, so the decoder - running the same loop on
the same payloads - reproduces the reconstruction bit for bit.
"""

from dataclasses import dataclass, field

import numpy as np

from stec import _kernels
from stec.codec import decode_residual, encode_residual
from stec.errors import StecError
from stec.media_io import FrameSequence, ImageTensor

UNIT_IFRAME = "I"
UNIT_RESIDUAL = "residual"

INTERP_AVERAGE = "Average"
INTERP_MOTION = "MotionCompensated"


@dataclass(frozen=True)
class SchedulerConfig:
    """Thresholds for entropy-driven GOP size selection."""

    tau: int = 16
    lower: float = 6.0
    upper: float = 8.0
    allowed: tuple = (2, 8, 16)

    def __post_init__(self):
        if not 0 < self.lower < self.upper:
            raise StecError("need 0 < L < U")
        if self.tau < 1:
            raise StecError("tau must be >= 1")
        for t in self.allowed:
            if t < 2 or t & (t - 1):
                raise StecError("allowed GOP sizes must be powers of two >= 2")


@dataclass(frozen=True)
class InterpolatorConfig:
    kind: str = INTERP_AVERAGE
    block_size: int = 8
    search_range: int = 8

    def __post_init__(self):
        if self.kind not in (INTERP_AVERAGE, INTERP_MOTION):
            raise StecError(f"unknown interpolator {self.kind!r}")
        if self.block_size < 1 or self.search_range < 0:
            raise StecError("bad interpolator geometry")


@dataclass(frozen=True)
class GopPlan:
    """Decode-order schedule for one GOP: (target, left ref, right ref)."""

    T: int
    h_t: float
    steps: tuple

    def __post_init__(self):
        targets = [s[0] for s in self.steps]
        interior = set(range(1, self.T))
        if sorted(targets) != sorted(interior):
            raise StecError("every interior index must appear exactly once as a target")
        decoded = {0, self.T}
        for t, left, right in self.steps:
            if left not in decoded or right not in decoded:
                raise StecError(f"step {t}: references ({left}, {right}) not yet decoded")
            if not left < t < right:
                raise StecError(f"step {t}: references must bracket the target")
            decoded.add(t)


class ReconBuffer:
    """Reconstructed frames of the active GOP, readable only once written."""

    def __init__(self):
        self._frames = {}

    def put(self, idx, frame):
        self._frames[idx] = frame

    def get(self, idx):
        if idx not in self._frames:
            raise StecError(f"frame {idx} not reconstructed yet")
        return self._frames[idx]

    def __contains__(self, idx):
        return idx in self._frames


def temporal_residual(x0, x_tau):
    """Signed per-sample difference in integer 8-bit units (-255..255)."""
    if x0.samples.shape != x_tau.samples.shape:
        raise StecError("frame dimension mismatch")
    a = np.rint(x_tau.samples * 255.0).astype(np.int16)
    b = np.rint(x0.samples * 255.0).astype(np.int16)
    return (a - b).astype(np.int16)


def temporal_entropy(diff):
    """Shannon entropy (bits) of the pooled histogram of difference values."""
    values, counts = np.unique(np.asarray(diff).ravel(), return_counts=True)
    p = counts.astype(np.float64) / counts.sum()
    return float(-(p * np.log2(p)).sum() + 0.0)


def select_gop_size(h_t, cfg=SchedulerConfig()):
    """T = 2 for high motion, 8 in between, 16 for low motion
    (closed-left boundaries at L and U)."""
    if h_t >= cfg.upper:
        return 2
    if h_t >= cfg.lower:
        return 8
    return 16


def build_schedule(T):
    """Breadth-first midpoint recursion; boundaries 0 and T are I-frames."""
    if T < 2 or T & (T - 1):
        raise StecError(f"GOP size must be a power of two >= 2, got {T}")
    steps = []
    level = [(0, T)]
    while level:
        nxt = []
        for left, right in level:
            if right - left < 2:
                continue
            mid = (left + right) // 2
            steps.append((mid, left, right))
            nxt += [(left, mid), (mid, right)]
        level = nxt
    return steps


def make_plan(T, h_t=0.0):
    """Validated GopPlan for a GOP of size T."""
    return GopPlan(T=T, h_t=h_t, steps=tuple(build_schedule(T)))


def interpolate(left, right, cfg=InterpolatorConfig()):
    """Predict the middle frame from two reconstructed references."""
    if left.samples.shape != right.samples.shape:
        raise StecError("reference dimension mismatch")
    if cfg.kind == INTERP_AVERAGE:
        return ImageTensor(0.5 * (left.samples + right.samples))
    lq = np.rint(left.samples * 255.0).astype(np.int32)
    rq = np.rint(right.samples * 255.0).astype(np.int32)
    vectors = _kernels.mc_search(lq, rq, cfg.block_size, cfg.search_range)
    return ImageTensor(_mc_blend(left.samples, right.samples, vectors, cfg.block_size))


def _mc_blend(left, right, vectors, block_size):
    h, w, _ = left.shape
    out = np.empty_like(left)
    ys = np.arange(h)
    xs = np.arange(w)
    for by in range(vectors.shape[0]):
        y0, y1 = by * block_size, min((by + 1) * block_size, h)
        for bx in range(vectors.shape[1]):
            x0, x1 = bx * block_size, min((bx + 1) * block_size, w)
            dy, dx = int(vectors[by, bx, 0]), int(vectors[by, bx, 1])
            yl = np.clip(ys[y0:y1] + dy, 0, h - 1)
            xl = np.clip(xs[x0:x1] + dx, 0, w - 1)
            yr = np.clip(ys[y0:y1] - dy, 0, h - 1)
            xr = np.clip(xs[x0:x1] - dx, 0, w - 1)
            out[y0:y1, x0:x1, :] = 0.5 * (
                left[np.ix_(yl, xl)] + right[np.ix_(yr, xr)]
            )
    return out


@dataclass
class CodedUnit:
    kind: str
    index: int
    payload: bytes


@dataclass
class GopRecord:
    start: int
    T: int
    h_t: float
    units: list = field(default_factory=list)


def encode_gop(frames, start, T, h_t, codec, icfg, recon_left=None):
    """Code one GOP (frames[start .. start+T]); returns the record and the
    encoder-side reconstructions (the decoder reproduces these exactly).

    recon_left is the reconstructed shared boundary from the previous GOP;
    when given, frame ``start`` is not re-coded.
    """
    h, w = frames[start].height, frames[start].width
    buf = ReconBuffer()
    units = []

    def code_iframe(idx):
        payload = codec.encode(frames[idx])
        units.append(CodedUnit(UNIT_IFRAME, idx, payload))
        buf.put(idx, codec.decode(payload, h, w))

    if recon_left is None:
        code_iframe(start)
    else:
        buf.put(start, recon_left)
    if T >= 1:
        code_iframe(start + T)

    if T >= 2:
        for t, left, right in build_schedule(T):
            pred = interpolate(buf.get(start + left), buf.get(start + right), icfg)
            z = ImageTensor(frames[start + t].samples - pred.samples, mode="residual")
            payload = encode_residual(codec, z)
            units.append(CodedUnit(UNIT_RESIDUAL, start + t, payload))
            z_hat = decode_residual(codec, payload, h, w)
            recon = np.clip(pred.samples + z_hat.samples, 0.0, 1.0)
            buf.put(start + t, ImageTensor(recon))

    return GopRecord(start, T, h_t, units), buf


def decode_gop(record, codec, icfg, height, width, recon_left=None):
    """Decode one GOP record into a ReconBuffer (mirror of encode_gop)."""
    buf = ReconBuffer()
    if recon_left is not None:
        buf.put(record.start, recon_left)
    residual_units = []
    for unit in record.units:
        if unit.kind == UNIT_IFRAME:
            buf.put(unit.index, codec.decode(unit.payload, height, width))
        else:
            residual_units.append(unit)
    by_index = {u.index: u for u in residual_units}
    for t, left, right in build_schedule(record.T) if record.T >= 2 else []:
        idx = record.start + t
        unit = by_index.get(idx)
        if unit is None:
            raise StecError(f"missing residual unit for frame {idx}")
        pred = interpolate(buf.get(record.start + left), buf.get(record.start + right), icfg)
        z_hat = decode_residual(codec, unit.payload, height, width)
        buf.put(idx, ImageTensor(np.clip(pred.samples + z_hat.samples, 0.0, 1.0)))
    return buf


def plan_segments(seq, scfg):
    """Split a sequence into GOP segments with entropy-selected sizes.

    Returns (start, T, h_t) triples. H_T is probed between a segment's
    first frame and the frame tau ahead (clamped to the sequence end);
    trailing segments shrink T to the largest allowed size that fits, with
    a bare I-frame (T=0 record) for a single trailing frame.
    """
    n = len(seq.frames)
    if n < 2:
        raise StecError("need at least 2 frames")
    segments = []
    pos = 0
    while pos < n - 1:
        remaining = n - 1 - pos
        probe = min(pos + scfg.tau, n - 1)
        h_t = temporal_entropy(temporal_residual(seq.frames[pos], seq.frames[probe]))
        t_sel = select_gop_size(h_t, scfg)
        fits = [t for t in scfg.allowed if t <= min(t_sel, remaining)]
        t_use = max(fits) if fits else 1
        segments.append((pos, t_use, h_t))
        pos += t_use
    return segments


def encode_sequence(seq, codec, scfg=SchedulerConfig(), icfg=InterpolatorConfig()):
    """Code a whole sequence; consecutive GOPs share their boundary frame.

    Returns (records, encoder reconstructions in display order).
    """
    segments = plan_segments(seq, scfg)
    records = []
    recons = {}
    recon_left = None
    for start, t_use, h_t in segments:
        record, buf = encode_gop(seq.frames, start, t_use, h_t, codec, icfg, recon_left)
        records.append(record)
        for i in range(start, start + t_use + 1):
            if i in buf:
                recons[i] = buf.get(i)
        recon_left = buf.get(start + t_use)
    frames = [recons[i] for i in range(len(seq.frames))]
    return records, frames


def decode_sequence_records(records, codec, icfg, height, width, frame_count, frame_rate=30.0):
    recons = {}
    recon_left = None
    for record in records:
        buf = decode_gop(record, codec, icfg, height, width, recon_left)
        span = record.T if record.T >= 1 else 1
        for i in range(record.start, record.start + span + 1):
            if i in buf:
                recons[i] = buf.get(i)
        recon_left = buf.get(record.start + span)
    frames = [recons[i] for i in range(frame_count)]
    return FrameSequence(frames=frames, frame_rate=frame_rate)
