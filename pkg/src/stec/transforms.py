"""Analysis/synthesis transform pair.

Two backends share one parameter-vector contract:

* ``linear`` — an exact block subband transform on 2^n x 2^n patches with
  K basis vectors per block. Analysis and synthesis are exactly linear,
  which makes the subband energy identities testable to machine precision.
* ``conv`` — a small convolutional autoencoder; each down/upsampling unit
  is two convolutions, the second with stride 2 (transposed convolution
  on the synthesis side).

All torch computation runs in float64; parameters at rest are float32
vectors inside :class:`ModelParams` / the STEM model file.
"""

import hashlib
import struct
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from stec.errors import ModelFormatError, StecError
from stec.media_io import MODE_STANDARD, ImageTensor

MODEL_MAGIC = b"STEM"
MODEL_VERSION = 1

_BACKENDS = ("linear", "conv")
_ACTIVATIONS = ("identity", "smooth_leaky")


@dataclass(frozen=True)
class ArchitectureConfig:
    """Transform architecture; also snapshotted into model and bitstream files."""

    n: int = 2
    K: int = 8
    unit_channels: tuple = (16, 16)
    kernel_size: int = 3
    activation: str = "smooth_leaky"
    backend: str = "conv"
    in_channels: int = 1
    entropy_widths: tuple = (3, 3, 3)

    def __post_init__(self):
        if self.n < 1:
            raise StecError("n must be >= 1")
        if self.K < 1:
            raise StecError("K must be >= 1")
        if self.kernel_size % 2 != 1:
            raise StecError("kernel_size must be odd")
        if self.backend not in _BACKENDS:
            raise StecError(f"unknown backend {self.backend!r}")
        if self.activation not in _ACTIVATIONS:
            raise StecError(f"unknown activation {self.activation!r}")
        if self.in_channels not in (1, 3):
            raise StecError("in_channels must be 1 or 3")
        uc = self.unit_channels
        if isinstance(uc, int):
            uc = (uc,) * self.n
        uc = tuple(int(u) for u in uc)
        if len(uc) != self.n:
            raise StecError(f"unit_channels needs {self.n} entries, got {len(uc)}")
        object.__setattr__(self, "unit_channels", uc)
        object.__setattr__(self, "entropy_widths", tuple(int(w) for w in self.entropy_widths))

    @property
    def block(self):
        return 1 << self.n

    @property
    def block_dim(self):
        return self.block * self.block * self.in_channels


def paper_scale_config(in_channels=3):
    """The full-scale architecture (n=3, K=48); CPU training takes hours."""
    return ArchitectureConfig(
        n=3, K=48, unit_channels=(128, 128, 128), in_channels=in_channels
    )


@dataclass(frozen=True)
class LatentTensor:
    """(H/2^n, W/2^n, K) real-valued channel stack."""

    samples: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 3:
            raise StecError(f"latent must be (h, w, K), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise StecError("non-finite latent samples")
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


@dataclass
class ModelParams:
    """Flat parameter vectors for the two transforms and the entropy model."""

    analysis: np.ndarray
    synthesis: np.ndarray
    entropy: np.ndarray
    version: int = MODEL_VERSION

    def __post_init__(self):
        for name in ("analysis", "synthesis", "entropy"):
            vec = np.asarray(getattr(self, name), dtype=np.float64).ravel()
            if not np.all(np.isfinite(vec)):
                raise StecError(f"non-finite values in {name} parameters")
            setattr(self, name, vec)

    def astype_float32(self):
        return (
            self.analysis.astype(np.float32),
            self.synthesis.astype(np.float32),
            self.entropy.astype(np.float32),
        )


class SmoothLeaky(nn.Module):
    """Smooth rectifier with asymptotic slopes 1 (positive) and 0.2 (negative)."""

    curvature = 1e-3

    def forward(self, x):
        return 0.6 * x + 0.4 * torch.sqrt(x * x + self.curvature)


def _activation(cfg):
    return nn.Identity() if cfg.activation == "identity" else SmoothLeaky()


class ConvAnalysis(nn.Module):
    """n downsampling units; each is conv(s=1) + conv(s=2), last layer linear."""

    def __init__(self, cfg):
        super().__init__()
        k, pad = cfg.kernel_size, cfg.kernel_size // 2
        layers = []
        cin = cfg.in_channels
        for i, width in enumerate(cfg.unit_channels):
            cout = cfg.K if i == cfg.n - 1 else width
            layers += [nn.Conv2d(cin, width, k, 1, pad), _activation(cfg)]
            layers += [nn.Conv2d(width, cout, k, 2, pad)]
            if i < cfg.n - 1:
                layers.append(_activation(cfg))
            cin = cout
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class ConvSynthesis(nn.Module):
    """Mirror of ConvAnalysis: Tconv(s=2) + conv(s=1) per upsampling unit."""

    def __init__(self, cfg):
        super().__init__()
        k, pad = cfg.kernel_size, cfg.kernel_size // 2
        layers = []
        cin = cfg.K
        for i, width in enumerate(reversed(cfg.unit_channels)):
            cout = cfg.in_channels if i == cfg.n - 1 else width
            layers += [
                nn.ConvTranspose2d(cin, width, k, 2, pad, output_padding=1),
                _activation(cfg),
                nn.Conv2d(width, cout, k, 1, pad),
            ]
            if i < cfg.n - 1:
                layers.append(_activation(cfg))
            cin = cout
        self.net = nn.Sequential(*layers)

    def forward(self, y):
        return self.net(y)


class LinearAnalysis(nn.Module):
    """Block transform: each 2^n x 2^n x C patch maps to K coefficients."""

    def __init__(self, cfg):
        super().__init__()
        self.block = cfg.block
        self.weight = nn.Parameter(torch.zeros(cfg.K, cfg.block_dim))
        self.bias = nn.Parameter(torch.zeros(cfg.K))

    def forward(self, x):
        b = self.block
        cols = F.unfold(x, kernel_size=b, stride=b)  # (B, C*b*b, L)
        y = torch.einsum("kd,bdl->bkl", self.weight, cols) + self.bias[None, :, None]
        hh, ww = x.shape[2] // b, x.shape[3] // b
        return y.reshape(x.shape[0], -1, hh, ww)


class LinearSynthesis(nn.Module):
    """Adjoint-shaped block transform back to the image grid."""

    def __init__(self, cfg):
        super().__init__()
        self.block = cfg.block
        self.out_channels = cfg.in_channels
        self.weight = nn.Parameter(torch.zeros(cfg.block_dim, cfg.K))
        self.bias = nn.Parameter(torch.zeros(cfg.block_dim))

    def forward(self, y):
        b = self.block
        bsz, k, hh, ww = y.shape
        cols = y.reshape(bsz, k, hh * ww)
        out = torch.einsum("dk,bkl->bdl", self.weight, cols) + self.bias[None, :, None]
        return F.fold(out, output_size=(hh * b, ww * b), kernel_size=b, stride=b)


def _build_modules(cfg, dtype=torch.float64):
    if cfg.backend == "conv":
        analysis, synthesis = ConvAnalysis(cfg), ConvSynthesis(cfg)
    else:
        analysis, synthesis = LinearAnalysis(cfg), LinearSynthesis(cfg)
    return analysis.to(dtype), synthesis.to(dtype)


def _pack(module):
    parts = [p.detach().cpu().numpy().ravel() for _, p in module.named_parameters()]
    if not parts:
        return np.zeros(0, dtype=np.float64)
    return np.concatenate(parts).astype(np.float64)


def _load_vector(module, vec):
    vec = np.asarray(vec, dtype=np.float64)
    offset = 0
    with torch.no_grad():
        for _, p in module.named_parameters():
            numel = p.numel()
            if offset + numel > vec.size:
                raise StecError("parameter vector too short for architecture")
            p.copy_(torch.from_numpy(vec[offset : offset + numel].reshape(p.shape)))
            offset += numel
    if offset != vec.size:
        raise StecError(
            f"parameter count mismatch: vector has {vec.size}, architecture needs {offset}"
        )


def _named_views(module, flat):
    """Slice a flat tensor into {param_name: view} preserving autograd."""
    out = {}
    offset = 0
    for name, p in module.named_parameters():
        numel = p.numel()
        out[name] = flat[offset : offset + numel].reshape(p.shape)
        offset += numel
    if offset != flat.numel():
        raise StecError("parameter vector length mismatch")
    return out


class TransformPair:
    """Torch-side holder of the analysis/synthesis modules for one config."""

    def __init__(self, cfg, params=None, dtype=torch.float64):
        self.cfg = cfg
        self.dtype = dtype
        self.analysis, self.synthesis = _build_modules(cfg, dtype)
        if params is not None:
            self.load(params)

    def load(self, params):
        _load_vector(self.analysis, params.analysis)
        _load_vector(self.synthesis, params.synthesis)

    def dump(self, entropy_vec=None):
        ent = np.zeros(0) if entropy_vec is None else entropy_vec
        return ModelParams(_pack(self.analysis), _pack(self.synthesis), ent)

    def analyze_tensor(self, x):
        self._check_dims(x.shape[2], x.shape[3])
        return self.analysis(x)

    def synthesize_tensor(self, y):
        return self.synthesis(y)

    def analyze_with(self, theta, x):
        """Analysis forward through an external flat parameter tensor."""
        return torch.func.functional_call(self.analysis, _named_views(self.analysis, theta), (x,))

    def synthesize_with(self, phi, y):
        return torch.func.functional_call(self.synthesis, _named_views(self.synthesis, phi), (y,))

    def _check_dims(self, h, w):
        d = 1 << self.cfg.n
        if h % d or w % d:
            raise StecError(f"input dims {h}x{w} not divisible by 2^n={d}")

    def theta_size(self):
        return sum(p.numel() for p in self.analysis.parameters())

    def phi_size(self):
        return sum(p.numel() for p in self.synthesis.parameters())


def init_params(cfg, seed=0, orthonormal=False):
    """Deterministic parameter initialization from a numpy generator.

    orthonormal=True (linear backend only) makes the synthesis the exact
    transpose of an orthonormal analysis, so the pair inverts when K equals
    the block dimension.
    """
    rng = np.random.default_rng(seed)
    pair = TransformPair(cfg)

    def entropy_vec():
        from stec.entropy_model import FactorizedModel

        return FactorizedModel(cfg.K, widths=cfg.entropy_widths, seed=seed).param_vector()

    if cfg.backend == "linear" and orthonormal:
        d = cfg.block_dim
        if cfg.K > d:
            raise StecError("orthonormal init needs K <= block dimension")
        a = rng.standard_normal((d, d))
        q, _ = np.linalg.qr(a)
        wa = q[:, : cfg.K].T  # rows orthonormal
        theta = np.concatenate([wa.ravel(), np.zeros(cfg.K)])
        phi = np.concatenate([wa.T.ravel(), np.zeros(d)])
        params = ModelParams(theta, phi, entropy_vec())
        pair.load(params)
        return params
    for module in (pair.analysis, pair.synthesis):
        with torch.no_grad():
            for name, p in module.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                else:
                    fan_in = p.numel() // p.shape[0] if p.ndim > 1 else p.numel()
                    std = (1.0 / max(fan_in, 1)) ** 0.5
                    vals = rng.standard_normal(tuple(p.shape)) * std
                    p.copy_(torch.from_numpy(vals))
    return pair.dump(entropy_vec())


def to_torch(arr):
    """float64 torch tensor from (possibly read-only) numpy data."""
    return torch.from_numpy(np.array(arr, dtype=np.float64, copy=True))


def _to_torch_image(x):
    return to_torch(x.samples).permute(2, 0, 1)[None]


def analyze(x, params, cfg):
    """Image -> (H/2^n, W/2^n, K) latent. Deterministic given params."""
    pair = TransformPair(cfg, params)
    with torch.no_grad():
        y = pair.analyze_tensor(_to_torch_image(x))
    return LatentTensor(y[0].permute(1, 2, 0).numpy())


def synthesize(latent, params, cfg, mode=MODE_STANDARD):
    """Latent -> image with dims latent dims x 2^n. Output is not clamped."""
    if latent.channels != cfg.K:
        raise StecError(f"latent has {latent.channels} channels, config K={cfg.K}")
    pair = TransformPair(cfg, params)
    y = to_torch(latent.samples).permute(2, 0, 1)[None]
    with torch.no_grad():
        x = pair.synthesize_tensor(y)
    return ImageTensor(x[0].permute(1, 2, 0).numpy(), mode=mode)


@dataclass
class ParamTensors:
    """Differentiable flat-parameter views handed to loss evaluators."""

    analysis: torch.Tensor
    synthesis: torch.Tensor
    entropy: torch.Tensor


def gradient(params, loss_evaluator):
    """d(loss)/d(params) for a torch-differentiable scalar loss.

    ``loss_evaluator`` receives a :class:`ParamTensors` whose fields are
    views of one flat tensor and must build its scalar with torch ops
    (e.g. via ``TransformPair.analyze_with``). Returns the gradient as one
    vector ordered (analysis, synthesis, entropy). Non-finite loss or
    gradient raises instead of silently zeroing.
    """
    sizes = (params.analysis.size, params.synthesis.size, params.entropy.size)
    flat = torch.tensor(
        np.concatenate([params.analysis, params.synthesis, params.entropy]),
        dtype=torch.float64,
        requires_grad=True,
    )
    views = ParamTensors(
        flat[: sizes[0]],
        flat[sizes[0] : sizes[0] + sizes[1]],
        flat[sizes[0] + sizes[1] :],
    )
    loss = loss_evaluator(views)
    if not torch.isfinite(loss):
        raise StecError("loss evaluator returned a non-finite value")
    (grad,) = torch.autograd.grad(loss, flat, allow_unused=True)
    if grad is None:
        return np.zeros(flat.numel())
    g = grad.detach().numpy()
    if not np.all(np.isfinite(g)):
        raise StecError("gradient is non-finite (non-differentiable point?)")
    return g


# ---------------------------------------------------------------------------
# STEM model file
# ---------------------------------------------------------------------------

_BACKEND_CODES = {"linear": 0, "conv": 1}
_ACTIVATION_CODES = {"identity": 0, "smooth_leaky": 1}


def config_bytes(cfg):
    """Architecture snapshot shared by the model file and the container."""
    blob = struct.pack(
        "<BBBHBB",
        _BACKEND_CODES[cfg.backend],
        _ACTIVATION_CODES[cfg.activation],
        cfg.n,
        cfg.K,
        cfg.kernel_size,
        cfg.in_channels,
    )
    blob += struct.pack("<B", len(cfg.unit_channels))
    blob += struct.pack(f"<{len(cfg.unit_channels)}H", *cfg.unit_channels)
    blob += struct.pack("<B", len(cfg.entropy_widths))
    blob += struct.pack(f"<{len(cfg.entropy_widths)}B", *cfg.entropy_widths)
    return blob


def parse_config_bytes(buf, pos):
    backend_c, act_c, n, k, kern, cin = struct.unpack_from("<BBBHBB", buf, pos)
    pos += struct.calcsize("<BBBHBB")
    (n_units,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    units = struct.unpack_from(f"<{n_units}H", buf, pos)
    pos += 2 * n_units
    (n_widths,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    widths = struct.unpack_from(f"<{n_widths}B", buf, pos)
    pos += n_widths
    backends = {v: key for key, v in _BACKEND_CODES.items()}
    acts = {v: key for key, v in _ACTIVATION_CODES.items()}
    if backend_c not in backends or act_c not in acts:
        raise ModelFormatError("unknown backend/activation code")
    cfg = ArchitectureConfig(
        n=n,
        K=k,
        unit_channels=units,
        kernel_size=kern,
        activation=acts[act_c],
        backend=backends[backend_c],
        in_channels=cin,
        entropy_widths=widths,
    )
    return cfg, pos


def _header_bytes(cfg, version):
    return struct.pack("<4sB", MODEL_MAGIC, version) + config_bytes(cfg)


def serialize_model(params, cfg):
    """Length-prefixed binary model: header, float32 vectors, blake2b-64 hash."""
    body = _header_bytes(cfg, params.version)
    for vec in params.astype_float32():
        body += struct.pack("<Q", vec.size)
        body += vec.astype("<f4").tobytes()
    digest = hashlib.blake2b(body, digest_size=8).digest()
    return body + digest


def model_content_hash(params, cfg):
    """64-bit content hash of the at-rest (float32) model representation."""
    blob = serialize_model(params, cfg)
    return struct.unpack("<Q", blob[-8:])[0]


def save_model(params, cfg, path):
    with open(path, "wb") as fh:
        fh.write(serialize_model(params, cfg))


def deserialize_model(blob):
    if len(blob) < 21:
        raise ModelFormatError("model file truncated")
    body, digest = blob[:-8], blob[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise ModelFormatError("model file hash mismatch (corrupted)")
    magic, version = struct.unpack_from("<4sB", body, 0)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"bad model magic {magic!r}")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    try:
        cfg, pos = parse_config_bytes(body, struct.calcsize("<4sB"))
    except struct.error as exc:
        raise ModelFormatError("model file truncated in header") from exc
    vecs = []
    for _ in range(3):
        (count,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        end = pos + 4 * count
        if end > len(body):
            raise ModelFormatError("model file truncated inside parameter array")
        vecs.append(np.frombuffer(body[pos:end], dtype="<f4").astype(np.float64))
        pos = end
    if pos != len(body):
        raise ModelFormatError("trailing bytes in model file")
    params = ModelParams(*vecs, version=version)
    return params, cfg


def load_model(path):
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())
