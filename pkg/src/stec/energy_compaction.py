"""Channel energy profiling, the two-phase compaction penalty, and optimal
bit allocation for the subband view of the analysis/synthesis pair.

The latent's K channels act as subbands: A_k is the normalized share of
latent energy in channel k, and B_k is the gain from unit quantization
noise in channel k to reconstruction-error variance. Minimizing
sum(log(A_k * B_k)) compacts energy; the closed-form allocation below
equalizes the marginal distortion of every channel under a total-rate
constraint.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch

from stec.errors import DegenerateInputError, StecError
from stec.transforms import LatentTensor, TransformPair, to_torch

log = logging.getLogger(__name__)

BK_CONSTANT_PROBE = "ConstantProbe"
BK_IMPULSE_ENERGY = "ImpulseEnergy"

SCORE_FLOOR = 1e-30


@dataclass(frozen=True)
class EnergyProfile:
    """Channel variances and the normalized energy distribution A_k,
    optionally with the noise gains B_k."""

    channel_variances: np.ndarray
    input_variance: float
    A: np.ndarray
    B: np.ndarray = None
    bk_method: str = BK_CONSTANT_PROBE

    def __post_init__(self):
        a = np.asarray(self.A, dtype=np.float64)
        if np.any(a < 0):
            raise StecError("A_k must be non-negative")
        if abs(a.sum() - 1.0) > 1e-9:
            raise StecError("A_k must sum to 1")
        object.__setattr__(self, "A", a)
        object.__setattr__(
            self, "channel_variances", np.asarray(self.channel_variances, dtype=np.float64)
        )
        if self.B is not None:
            b = np.asarray(self.B, dtype=np.float64)
            if np.any(b < 0):
                raise StecError("B_k must be non-negative")
            object.__setattr__(self, "B", b)

    @property
    def dominant_channel(self):
        # argmax returns the lowest index on ties
        return int(np.argmax(self.A))


def _batch_latents(batch, params, cfg):
    pair = TransformPair(cfg, params)
    ys = []
    with torch.no_grad():
        for img in batch:
            x = to_torch(img.samples).permute(2, 0, 1)[None]
            ys.append(pair.analyze_tensor(x)[0].numpy())
    return np.stack(ys)  # (B, K, h, w)


def compute_Ak(batch, params, cfg):
    """Profile A_k from a batch: per-channel latent variance pooled over the
    batch and spatial positions, normalized to sum 1."""
    if not batch:
        raise StecError("empty batch")
    lat = _batch_latents(batch, params, cfg)
    channel_var = lat.transpose(1, 0, 2, 3).reshape(lat.shape[1], -1).var(axis=1)
    total = channel_var.sum()
    if total <= 0:
        raise DegenerateInputError("all-constant batch: latent variance is zero")
    x_var = float(np.var(np.concatenate([img.samples.ravel() for img in batch])))
    return EnergyProfile(
        channel_variances=channel_var,
        input_variance=x_var,
        A=channel_var / total,
    )


def channel_energy_fractions(y):
    """A_k of a single latent (h, w, K) without building a profile."""
    arr = y.samples if isinstance(y, LatentTensor) else np.asarray(y)
    v = arr.reshape(-1, arr.shape[2]).var(axis=0)
    total = v.sum()
    if total <= 0:
        raise DegenerateInputError("latent variance is zero")
    return v / total


def estimate_Bk_probe(params, cfg, probe_size=8):
    """The constant-probe estimator: feed an all-ones channel-k latent into
    the synthesis transform and take the output sample variance.

    Shift-invariant linear synthesis maps constants to constants, so this
    measures exactly zero there; use the impulse estimator for the linear
    backend.
    """
    pair = TransformPair(cfg, params)
    out = np.empty(cfg.K)
    with torch.no_grad():
        for k in range(cfg.K):
            probe = torch.zeros(1, cfg.K, probe_size, probe_size, dtype=torch.float64)
            probe[0, k] = 1.0
            xh = pair.synthesize_tensor(probe)[0].numpy()
            out[k] = xh.var()
    return out


def estimate_Bk_impulse(params, cfg, latent_size=4):
    """Exact per-channel noise gain for the linear backend.

    B_k is the mean over output samples of the squared synthesis response
    to a unit impulse in channel k: with one latent sample per channel per
    2^n x 2^n block, B_k = ||response||^2 / (block output sample count), so
    independent white noise of variance v_k per channel reconstructs with
    error variance sum_k B_k v_k.
    """
    if cfg.backend != "linear":
        raise StecError("impulse estimator requires the linear backend")
    pair = TransformPair(cfg, params)
    out = np.empty(cfg.K)
    pos = latent_size // 2
    with torch.no_grad():
        zero = torch.zeros(1, cfg.K, latent_size, latent_size, dtype=torch.float64)
        base = pair.synthesize_tensor(zero)[0].numpy()
        for k in range(cfg.K):
            probe = zero.clone()
            probe[0, k, pos, pos] = 1.0
            resp = pair.synthesize_tensor(probe)[0].numpy() - base
            out[k] = (resp**2).sum() / cfg.block_dim
    return out


def build_profile(batch, params, cfg, bk_method=None):
    """A_k plus B_k with the backend-appropriate default estimator."""
    if bk_method is None:
        bk_method = BK_IMPULSE_ENERGY if cfg.backend == "linear" else BK_CONSTANT_PROBE
    prof = compute_Ak(batch, params, cfg)
    if bk_method == BK_IMPULSE_ENERGY:
        b = estimate_Bk_impulse(params, cfg)
    elif bk_method == BK_CONSTANT_PROBE:
        b = estimate_Bk_probe(params, cfg)
    else:
        raise StecError(f"unknown B_k method {bk_method!r}")
    return EnergyProfile(
        channel_variances=prof.channel_variances,
        input_variance=prof.input_variance,
        A=prof.A,
        B=b,
        bk_method=bk_method,
    )


def energy_entropy_penalty(A):
    """Shannon entropy of the energy distribution: sum_k -A_k log2 A_k."""
    if isinstance(A, torch.Tensor):
        a = A
        nz = a > 0
        return -(a[nz] * torch.log2(a[nz])).sum()
    a = np.asarray(A, dtype=np.float64)
    nz = a > 0
    return float(-(a[nz] * np.log2(a[nz])).sum())


def bk_penalty(B, e):
    """Phase-2 penalty: the noise gain of the dominant channel."""
    if e < 0 or e >= len(B):
        raise StecError(f"channel index {e} out of range")
    return B[e] if isinstance(B, torch.Tensor) else float(B[e])


def compaction_score(A, B):
    """sum_k ln(max(A_k B_k, floor)); lower means better energy compaction."""
    prod = np.maximum(np.asarray(A, dtype=np.float64) * np.asarray(B, dtype=np.float64),
                      SCORE_FLOOR)
    return float(np.log(prod).sum())


@dataclass(frozen=True)
class BitAllocation:
    """Closed-form rate split over channels under sum(alpha_k R_k) = R."""

    alpha: np.ndarray
    rates: np.ndarray
    total_rate: float
    epsilon: float
    predicted_min_variance: float
    excluded: tuple = ()

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        rates = np.asarray(self.rates, dtype=np.float64)
        if np.any(alpha <= 0):
            raise StecError("alpha_k must be positive")
        achieved = float(np.dot(alpha, rates))
        if abs(achieved - self.total_rate) > 1e-9 * max(1.0, abs(self.total_rate)):
            raise StecError(
                f"rate constraint violated: sum alpha_k R_k = {achieved}, want {self.total_rate}"
            )
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "rates", rates)


def allocation_objective(profile, alloc):
    """sum_k B_k eps^2 2^(-2 R_k) sigma_yk^2 over the allocated channels."""
    active = [k for k in range(len(profile.A)) if k not in alloc.excluded]
    b = profile.B[active]
    var = profile.channel_variances[active]
    return float(np.sum(b * alloc.epsilon**2 * 2.0 ** (-2.0 * alloc.rates[active]) * var))


def optimal_bit_allocation(profile, alpha, total_rate, epsilon, clamp_nonnegative=False):
    """Equalize marginal distortion across channels (Lagrangian closed form).

    Channels with zero variance or zero gain are excluded; the remaining
    alpha are rescaled to preserve their sum, and the exclusion is
    reported. With sum(alpha)=1 and sigma_yk^2 = A_k sigma_x^2 the achieved
    minimum equals prod_k (A_k B_k / alpha_k)^alpha_k * eps^2 2^(-2R) sigma_x^2.
    Negative rates are permitted unless clamp_nonnegative asks for the
    water-filling variant.
    """
    if profile.B is None:
        raise StecError("profile has no B_k estimates")
    if total_rate < 0:
        raise StecError("total rate must be >= 0")
    alpha = np.asarray(alpha, dtype=np.float64)
    k_total = len(profile.A)
    if alpha.shape != (k_total,):
        raise StecError(f"alpha must have {k_total} entries")
    if np.any(alpha <= 0):
        raise StecError("alpha_k must be positive")

    var = profile.channel_variances
    gains = profile.B
    active = (var > 0) & (gains > 0)
    excluded = tuple(np.nonzero(~active)[0].tolist())
    if excluded:
        log.warning("excluding degenerate channels %s from allocation", excluded)
    if not np.any(active):
        raise DegenerateInputError("no channel with positive variance and gain")

    s_orig = alpha.sum()
    a = alpha[active] * (s_orig / alpha[active].sum())
    s = a.sum()  # equals s_orig by construction

    t = np.log2(gains[active] * var[active] / a)
    log_nu = (-2.0 * total_rate + np.dot(a, t)) / s
    rates_active = 0.5 * (t - log_nu)

    if clamp_nonnegative:
        rates_active = _water_fill(t, a, total_rate)

    rates = np.zeros(k_total)
    rates[active] = rates_active
    full_alpha = alpha.copy()
    full_alpha[active] = a
    nu = 2.0**log_nu if not clamp_nonnegative else None
    if clamp_nonnegative:
        achieved = float(
            np.sum(gains[active] * epsilon**2 * 2.0 ** (-2.0 * rates_active) * var[active])
        )
    else:
        achieved = float(epsilon**2 * nu * s)
    return BitAllocation(
        alpha=full_alpha,
        rates=rates,
        total_rate=float(total_rate),
        epsilon=epsilon,
        predicted_min_variance=achieved,
        excluded=excluded,
    )


def _water_fill(t, a, total_rate):
    """Re-solve with R_k >= 0: clamp negative channels to zero iteratively."""
    idx = np.arange(t.size)
    rates = np.zeros(t.size)
    while idx.size:
        s = a[idx].sum()
        log_nu = (-2.0 * total_rate + np.dot(a[idx], t[idx])) / s
        r = 0.5 * (t[idx] - log_nu)
        neg = r < 0
        if not np.any(neg):
            rates[idx] = r
            return rates
        idx = idx[~neg]
    return rates


def predicted_min_variance_product(profile, alpha, total_rate, epsilon):
    """The product-form minimum: prod_k (A_k B_k / alpha_k)^alpha_k
    * eps^2 2^(-2R) sigma_x^2 (exact when sum(alpha) = 1)."""
    a = np.asarray(alpha, dtype=np.float64)
    prod = np.prod((profile.A * profile.B / a) ** a)
    return float(prod * epsilon**2 * 2.0 ** (-2.0 * total_rate) * profile.input_variance)


def fit_epsilon(rates, variance_ratios):
    """Least-squares fit of eps in sigma_q^2 = eps^2 2^(-2R) sigma_y^2,
    slope fixed at -2 in the log2 domain."""
    r = np.asarray(rates, dtype=np.float64)
    ratio = np.asarray(variance_ratios, dtype=np.float64)
    if r.size == 0 or r.shape != ratio.shape:
        raise StecError("need matching non-empty rate/ratio arrays")
    if np.any(ratio <= 0):
        raise StecError("variance ratios must be positive")
    log_eps2 = np.mean(np.log2(ratio) + 2.0 * r)
    return float(2.0 ** (log_eps2 / 2.0))


def measure_quantizer_pairs(latents, scales):
    """(R_k, var(q_k)/var(y_k)) pairs from actually quantizing latents at
    several step sizes; feeds :func:`fit_epsilon`."""
    ys = np.stack([la.samples if isinstance(la, LatentTensor) else la for la in latents])
    k_total = ys.shape[3]
    flat = ys.transpose(3, 0, 1, 2).reshape(k_total, -1)
    rates, ratios = [], []
    for s in scales:
        q = np.rint(flat * s) / s
        err = q - flat
        for k in range(k_total):
            vy = flat[k].var()
            ve = err[k].var()
            if vy <= 0 or ve <= 0:
                continue
            symbols, counts = np.unique(np.rint(flat[k] * s), return_counts=True)
            p = counts / counts.sum()
            rates.append(float(-(p * np.log2(p)).sum()))
            ratios.append(float(ve / vy))
    return np.asarray(rates), np.asarray(ratios)
