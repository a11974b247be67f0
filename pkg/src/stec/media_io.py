"""Still image and frame-sequence I/O plus training-patch extraction.

Samples live in [0, 1] as float64 (residual-mode images use [-1, 1]).
Supported media: 8-bit PNG, binary PPM/PGM, uncompressed Y4M (4:4:4 or
4:2:0, chroma bilinearly upsampled on load).
"""

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from stec.errors import MediaFormatError

MODE_STANDARD = "standard"
MODE_RESIDUAL = "residual"


@dataclass(frozen=True)
class ImageTensor:
    """An (H, W, C) plane set with samples in [0,1] ([-1,1] in residual mode)."""

    samples: np.ndarray
    mode: str = MODE_STANDARD

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise MediaFormatError(f"expected (H, W, C) samples, got shape {arr.shape}")
        if arr.shape[2] not in (1, 3):
            raise MediaFormatError(f"channels must be 1 or 3, got {arr.shape[2]}")
        if not np.all(np.isfinite(arr)):
            raise MediaFormatError("non-finite samples")
        if self.mode not in (MODE_STANDARD, MODE_RESIDUAL):
            raise MediaFormatError(f"unknown sample mode: {self.mode}")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    @property
    def height(self):
        return self.samples.shape[0]

    @property
    def width(self):
        return self.samples.shape[1]

    @property
    def channels(self):
        return self.samples.shape[2]


@dataclass(frozen=True)
class FrameSequence:
    """Ordered frames of identical geometry; frame_rate is metadata only."""

    frames: list = field(default_factory=list)
    frame_rate: float = 30.0

    def __post_init__(self):
        if not self.frames:
            raise MediaFormatError("empty frame sequence")
        shape = self.frames[0].samples.shape
        for i, f in enumerate(self.frames):
            if f.samples.shape != shape:
                raise MediaFormatError(
                    f"frame {i} has shape {f.samples.shape}, expected {shape}"
                )

    def __len__(self):
        return len(self.frames)


def load_image(path):
    """Load an 8-bit PNG or binary PPM/PGM into an ImageTensor."""
    path = Path(path)
    if not path.exists():
        raise MediaFormatError(f"no such file: {path}")
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pgm"):
        return _load_pnm(path)
    try:
        with Image.open(path) as im:
            if im.mode == "I;16" or im.mode.startswith("I"):
                raise MediaFormatError(f"{path}: unsupported bit depth {im.mode}")
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if ("A" in im.mode or im.mode == "P") else "L")
            arr = np.asarray(im, dtype=np.float64)
    except MediaFormatError:
        raise
    except Exception as exc:
        raise MediaFormatError(f"unreadable image {path}: {exc}") from exc
    return ImageTensor(arr / 255.0)


def store_image(img, path):
    """Quantize samples to 8 bits and write PNG or PPM/PGM by extension."""
    path = Path(path)
    arr = to_uint8(img)
    if path.suffix.lower() in (".ppm", ".pgm"):
        _store_pnm(arr, path)
        return
    if arr.shape[2] == 1:
        Image.fromarray(arr[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def to_uint8(img):
    """Re-quantize [0,1] samples to integer codes 0..255."""
    return np.clip(np.rint(img.samples * 255.0), 0, 255).astype(np.uint8)


def from_uint8(arr, mode=MODE_STANDARD):
    return ImageTensor(np.asarray(arr, dtype=np.float64) / 255.0, mode=mode)


def _load_pnm(path):
    data = path.read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4 and pos < len(data):
        # header tokens are whitespace separated; '#' starts a comment
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if len(tokens) < 4:
        raise MediaFormatError(f"{path}: truncated PNM header")
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise MediaFormatError(f"{path}: unsupported PNM magic {magic!r}")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise MediaFormatError(f"{path}: bad PNM header") from exc
    if maxval != 255:
        raise MediaFormatError(f"{path}: unsupported bit depth (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise MediaFormatError(f"{path}: truncated payload ({len(payload)}/{need} bytes)")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels)
    return ImageTensor(arr.astype(np.float64) / 255.0)


def _store_pnm(arr, path):
    h, w, c = arr.shape
    magic = b"P6" if c == 3 else b"P5"
    header = b"%s\n%d %d\n255\n" % (magic, w, h)
    path.write_bytes(header + arr.tobytes())


_NUM_RE = re.compile(r"\d+")


def _natural_key(name):
    return [int(m) for m in _NUM_RE.findall(name)] or [0]


def load_sequence(path):
    """Load a Y4M file or a directory of numbered PNG frames."""
    path = Path(path)
    if path.is_dir():
        files = sorted(
            (p for p in path.iterdir() if p.suffix.lower() in (".png", ".ppm", ".pgm")),
            key=lambda p: (_natural_key(p.stem), p.name),
        )
        if not files:
            raise MediaFormatError(f"{path}: no frames found")
        frames = [load_image(p) for p in files]
        return FrameSequence(frames=frames, frame_rate=30.0)
    return _load_y4m(path)


# BT.601 limited-range YCbCr <-> RGB, the customary Y4M convention.
def _ycbcr_to_rgb(y, cb, cr):
    y = y - 16.0
    cb = cb - 128.0
    cr = cr - 128.0
    r = 1.164 * y + 1.596 * cr
    g = 1.164 * y - 0.392 * cb - 0.813 * cr
    b = 1.164 * y + 2.017 * cb
    return np.clip(np.stack([r, g, b], axis=-1) / 255.0, 0.0, 1.0)


def _rgb_to_ycbcr(rgb):
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 16.0 + 65.481 * r + 128.553 * g + 24.966 * b
    cb = 128.0 - 37.797 * r - 74.203 * g + 112.0 * b
    cr = 128.0 + 112.0 * r - 93.786 * g - 18.214 * b
    planes = [np.clip(np.rint(p), 0, 255).astype(np.uint8) for p in (y, cb, cr)]
    return planes


def _upsample2x_bilinear(plane, out_h, out_w):
    """Half-resolution chroma to full resolution; co-sited samples, edge clamp."""
    up = np.empty((plane.shape[0] * 2, plane.shape[1] * 2), dtype=np.float64)
    up[0::2, 0::2] = plane
    right = np.concatenate([plane[:, 1:], plane[:, -1:]], axis=1)
    up[0::2, 1::2] = 0.5 * (plane + right)
    down = np.concatenate([up[2::2, :], up[-2:-1, :]], axis=0)
    up[1::2, :] = 0.5 * (up[0::2, :] + down)
    return up[:out_h, :out_w]


def _load_y4m(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise MediaFormatError(f"unreadable file {path}: {exc}") from exc
    nl = data.find(b"\n")
    if nl < 0 or not data.startswith(b"YUV4MPEG2"):
        raise MediaFormatError(f"{path}: not a Y4M file")
    width = height = None
    rate = 30.0
    subsampling = "420"
    for tok in data[:nl].split(b" ")[1:]:
        if not tok:
            continue
        tag, val = tok[:1], tok[1:].decode("ascii", "replace")
        if tag == b"W":
            width = int(val)
        elif tag == b"H":
            height = int(val)
        elif tag == b"F":
            num, den = val.split(":")
            rate = int(num) / int(den)
        elif tag == b"C":
            if val.startswith("444"):
                subsampling = "444"
            elif val.startswith("420"):
                subsampling = "420"
            else:
                raise MediaFormatError(f"{path}: unsupported chroma mode C{val}")
    if not width or not height:
        raise MediaFormatError(f"{path}: missing geometry in Y4M header")
    if subsampling == "420" and (width % 2 or height % 2):
        raise MediaFormatError(f"{path}: 4:2:0 needs even dimensions")

    ysize = width * height
    csize = ysize if subsampling == "444" else (width // 2) * (height // 2)
    frames = []
    pos = nl + 1
    while pos < len(data):
        fnl = data.find(b"\n", pos)
        if fnl < 0 or not data[pos:fnl].startswith(b"FRAME"):
            raise MediaFormatError(f"{path}: malformed FRAME header at byte {pos}")
        pos = fnl + 1
        need = ysize + 2 * csize
        raw = data[pos : pos + need]
        if len(raw) < need:
            raise MediaFormatError(f"{path}: truncated frame payload")
        pos += need
        y = np.frombuffer(raw[:ysize], dtype=np.uint8).reshape(height, width).astype(np.float64)
        cb = np.frombuffer(raw[ysize : ysize + csize], dtype=np.uint8).astype(np.float64)
        cr = np.frombuffer(raw[ysize + csize :], dtype=np.uint8).astype(np.float64)
        if subsampling == "444":
            cb = cb.reshape(height, width)
            cr = cr.reshape(height, width)
        else:
            cb = _upsample2x_bilinear(cb.reshape(height // 2, width // 2), height, width)
            cr = _upsample2x_bilinear(cr.reshape(height // 2, width // 2), height, width)
        frames.append(ImageTensor(_ycbcr_to_rgb(y, cb, cr)))
    if not frames:
        raise MediaFormatError(f"{path}: Y4M file contains no frames")
    return FrameSequence(frames=frames, frame_rate=rate)


def store_sequence_y4m(seq, path):
    """Write a sequence as 4:4:4 Y4M (grayscale replicated to three planes)."""
    first = seq.frames[0]
    rate_num = int(round(seq.frame_rate * 1000))
    header = f"YUV4MPEG2 W{first.width} H{first.height} F{rate_num}:1000 Ip A1:1 C444\n"
    chunks = [header.encode("ascii")]
    for f in seq.frames:
        rgb = f.samples if f.channels == 3 else np.repeat(f.samples, 3, axis=2)
        y, cb, cr = _rgb_to_ycbcr(rgb)
        chunks.append(b"FRAME\n")
        chunks.extend(p.tobytes() for p in (y, cb, cr))
    Path(path).write_bytes(b"".join(chunks))


def store_sequence_pngs(seq, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    digits = max(4, len(str(len(seq.frames))))
    for i, f in enumerate(seq.frames):
        store_image(f, directory / f"f{i:0{digits}d}.png")


def extract_patches(img, size, stride, rng_seed=0):
    """Extract all fully-inside size x size patches on the stride grid.

    The patch *set* is the deterministic grid; the returned order is
    shuffled with rng_seed (sampling policy for training streams).
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    h, w = img.height, img.width
    if size > min(h, w):
        raise MediaFormatError(f"patch size {size} exceeds image {h}x{w}")
    offsets = [
        (i, j)
        for i in range(0, h - size + 1, stride)
        for j in range(0, w - size + 1, stride)
    ]
    rng = np.random.default_rng(rng_seed)
    rng.shuffle(offsets)
    return [
        ImageTensor(img.samples[i : i + size, j : j + size, :], mode=img.mode)
        for i, j in offsets
    ]
