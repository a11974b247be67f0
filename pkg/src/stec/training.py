"""Joint training of the transforms and the entropy model.

The loss is J = lambda * D + R + beta * P. The penalty P runs in two
phases: first the entropy of the channel energy distribution (drives
energy into few channels), then - once one channel dominates - the noise
gain B of that frozen dominant channel. Variable bit rates come from
fine-tuning a pretrained model with a new lambda and beta = 0.
"""

import io
import logging
from dataclasses import dataclass

import numpy as np
import torch

from stec.entropy_model import FactorizedModel
from stec.errors import StecError, TrainingDiverged
from stec.metrics import DISTORTION_MSE, DISTORTION_MSSSIM, ms_ssim_tensor
from stec.quantization import (
    METHOD_ROUND,
    METHOD_SOFT_VECTOR,
    METHOD_STRAIGHT_THROUGH,
    METHOD_UNIFORM_NOISE,
    QuantizerSpec,
    counter_uniform,
    ste_round,
    soft_quantize,
    round_half_away,
)
from stec.transforms import TransformPair, to_torch

log = logging.getLogger(__name__)

LAMBDA_LADDER = (2, 4, 8, 16, 32, 64)


@dataclass(frozen=True)
class LossConfig:
    lam: float
    beta: float = 0.0
    distortion_kind: str = DISTORTION_MSSSIM

    def __post_init__(self):
        if not self.lam > 0:
            raise StecError("lambda must be positive")
        if self.beta < 0:
            raise StecError("beta must be non-negative")
        if self.distortion_kind not in (DISTORTION_MSSSIM, DISTORTION_MSE):
            raise StecError(f"unknown distortion kind {self.distortion_kind!r}")


@dataclass(frozen=True)
class TrainSchedule:
    phase1_max_iters: int = 5000
    phase_switch_threshold: float = 0.5
    total_iters: int = 20000
    learning_rate: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    checkpoint_every: int = 200
    # per-batch max A_k is noisy; the switch tests a smoothed estimate
    switch_smoothing: float = 0.05

    def __post_init__(self):
        if self.phase1_max_iters > self.total_iters:
            raise StecError("phase1_max_iters must not exceed total_iters")
        if self.batch_size < 1 or self.total_iters < 0:
            raise StecError("bad schedule")
        if not 0 < self.switch_smoothing <= 1:
            raise StecError("switch_smoothing must lie in (0, 1]")


@dataclass(frozen=True)
class LossBreakdown:
    """One loss evaluation; R is in bits per input pixel."""

    D: float
    R: float
    P: float
    J: float
    phase: int
    lam: float
    beta: float

    def __post_init__(self):
        want = self.lam * self.D + self.R + self.beta * self.P
        if abs(self.J - want) > 1e-9 * max(1.0, abs(want)):
            raise StecError(f"inconsistent loss: J={self.J}, lam*D+R+beta*P={want}")


def compute_loss(x, x_hat, rate_bits_per_sample, penalty, cfg, phase=1):
    """Assemble J = lambda * D + R + beta * P from an image pair and the
    rate/penalty terms."""
    if cfg.distortion_kind == DISTORTION_MSSSIM:
        from stec.metrics import ms_ssim

        d = 1.0 - ms_ssim(x, x_hat)
    else:
        diff = x.samples - x_hat.samples
        d = float(np.mean(diff * diff))
    j = cfg.lam * d + rate_bits_per_sample + cfg.beta * penalty
    return LossBreakdown(
        D=d, R=float(rate_bits_per_sample), P=float(penalty), J=float(j),
        phase=phase, lam=cfg.lam, beta=cfg.beta,
    )


def _quantize_surrogate(y, quant, seed, offset):
    if quant.method == METHOD_UNIFORM_NOISE:
        noise = torch.from_numpy(
            counter_uniform(seed, y.numel(), offset).reshape(tuple(y.shape))
        ).to(y.dtype)
        return y + noise
    if quant.method == METHOD_SOFT_VECTOR:
        return soft_quantize(y, quant.sigma, quant.centers)
    if quant.method == METHOD_STRAIGHT_THROUGH:
        return ste_round(y)
    if quant.method == METHOD_ROUND:
        return round_half_away(y)
    raise StecError(f"unknown method {quant.method!r}")


def _channel_energy(y):
    """Per-channel variance of a (B, K, h, w) latent, and normalized A_k."""
    k = y.shape[1]
    flat = y.permute(1, 0, 2, 3).reshape(k, -1)
    var = flat.var(dim=1, unbiased=False)
    total = var.sum()
    return var, var / torch.clamp(total, min=1e-30)


def _probe_gain(pair, channel, k_total, probe_size=8, dtype=torch.float64):
    probe = torch.zeros(1, k_total, probe_size, probe_size, dtype=dtype)
    probe[0, channel] = 1.0
    out = pair.synthesize_tensor(probe)
    return out.var(unbiased=False)


class TrainingLog(list):
    """Rows of (iter, D, R, P, J, max_Ak, phase); renders to CSV."""

    def to_csv(self):
        buf = io.StringIO()
        buf.write("iter,D,R,P,J,max_Ak,phase\n")
        for row in self:
            buf.write(
                f"{row[0]},{row[1]:.8f},{row[2]:.8f},{row[3]:.8f},"
                f"{row[4]:.8f},{row[5]:.6f},{row[6]}\n"
            )
        return buf.getvalue()


def train(dataset, arch, loss_cfg, schedule, quant=None, init_params_vec=None,
          entropy_seed=None, frozen_dominant=None, dtype=torch.float32, threads=1):
    """Train transforms + entropy model; returns (ModelParams, TrainingLog).

    dataset is a sequence of equally-sized patches. Deterministic given the
    schedule seed: batches are drawn by a seeded generator and quantization
    noise comes from the counter-based stream; gradients are accumulated by
    a single-threaded backward (threads=1) so reruns match byte for byte.
    Divergence raises TrainingDiverged carrying the last good checkpoint.
    """
    if not dataset:
        raise StecError("empty dataset")
    if threads:
        torch.set_num_threads(threads)
    if schedule.total_iters == 0:
        if init_params_vec is not None:
            return init_params_vec, TrainingLog()
        from stec.transforms import init_params

        return init_params(arch, seed=schedule.seed), TrainingLog()
    quant = quant or QuantizerSpec()
    pair = TransformPair(arch, dtype=dtype)
    if init_params_vec is not None:
        pair.load(init_params_vec)
    else:
        from stec.transforms import init_params

        pair.load(init_params(arch, seed=schedule.seed))
    model = FactorizedModel(
        arch.K,
        support=(quant.c_min, quant.c_max),
        widths=arch.entropy_widths,
        seed=schedule.seed if entropy_seed is None else entropy_seed,
        dtype=dtype,
    )
    if init_params_vec is not None and init_params_vec.entropy.size:
        model.load_param_vector(init_params_vec.entropy)

    opt = torch.optim.Adam(
        list(pair.analysis.parameters())
        + list(pair.synthesis.parameters())
        + list(model.parameters()),
        lr=schedule.learning_rate,
    )

    rng = np.random.default_rng(schedule.seed)
    stack = np.stack([p.samples for p in dataset])  # (N, H, W, C)
    pixels_per_image = stack.shape[1] * stack.shape[2]

    phase = 1
    dominant = frozen_dominant
    if dominant is not None:
        phase = 2
    a_smooth = None  # EMA of the per-batch energy distribution
    loglist = TrainingLog()
    checkpoint = pair.dump(model.param_vector())

    for it in range(schedule.total_iters):
        idx = rng.integers(0, len(dataset), schedule.batch_size)
        x = to_torch(stack[idx]).permute(0, 3, 1, 2).to(dtype)

        y = pair.analyze_tensor(x)
        y = torch.clamp(y, quant.c_min, quant.c_max)
        noise_offset = it * y.numel()
        y_tilde = _quantize_surrogate(y, quant, schedule.seed, noise_offset)
        rate_bits = model.rate_bits(y_tilde)
        r = rate_bits / (x.shape[0] * pixels_per_image)
        x_hat = pair.synthesize_tensor(y_tilde)

        if loss_cfg.distortion_kind == DISTORTION_MSSSIM:
            d = 1.0 - ms_ssim_tensor(torch.clamp(x, 0, 1), torch.clamp(x_hat, 0, 1))
        else:
            d = ((x - x_hat) ** 2).mean()

        var, a_k = _channel_energy(y)
        if loss_cfg.beta > 0:
            if phase == 1:
                nz = a_k > 0
                p_term = -(a_k[nz] * torch.log2(a_k[nz])).sum()
            else:
                p_term = _probe_gain(pair, dominant, arch.K, dtype=dtype)
        else:
            p_term = torch.zeros((), dtype=dtype)

        j = loss_cfg.lam * d + r + loss_cfg.beta * p_term

        if not torch.isfinite(j):
            raise TrainingDiverged(f"non-finite loss at iter {it}", checkpoint=checkpoint)

        opt.zero_grad()
        j.backward()
        opt.step()

        a_batch = a_k.detach().numpy().astype(np.float64)
        if a_smooth is None:
            a_smooth = a_batch
        else:
            s = schedule.switch_smoothing
            a_smooth = (1 - s) * a_smooth + s * a_batch

        loglist.append(
            (it, float(d.detach()), float(r.detach()), float(p_term.detach()),
             float(j.detach()), float(a_smooth.max()), phase)
        )

        if phase == 1 and (
            a_smooth.max() > schedule.phase_switch_threshold
            or it + 1 >= schedule.phase1_max_iters
        ):
            phase = 2
            dominant = int(np.argmax(a_smooth))
            log.info(
                "phase 2 at iter %d: dominant channel %d (A=%.3f)", it, dominant, a_smooth.max()
            )

        if schedule.checkpoint_every and (it + 1) % schedule.checkpoint_every == 0:
            checkpoint = pair.dump(model.param_vector())

    return pair.dump(model.param_vector()), loglist


def finetune_lambda(pretrained, arch, lam_new, dataset, schedule,
                    distortion_kind=DISTORTION_MSSSIM, quant=None, dtype=torch.float32):
    """Continue training a pretrained model with a new lambda and beta = 0.

    Zero-iteration schedules return the pretrained parameters unchanged.
    """
    if schedule.total_iters == 0:
        return pretrained, TrainingLog()
    cfg = LossConfig(lam=lam_new, beta=0.0, distortion_kind=distortion_kind)
    return train(
        dataset,
        arch,
        cfg,
        schedule,
        quant=quant,
        init_params_vec=pretrained,
        dtype=dtype,
    )
