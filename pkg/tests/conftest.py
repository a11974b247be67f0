import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from util import easy_patches, smooth_patches  # noqa: E402

from stec.codec import ImageCodec  # noqa: E402
from stec.metrics import ms_ssim, msssim_to_db  # noqa: E402
from stec.training import LossConfig, TrainSchedule, finetune_lambda, train  # noqa: E402
from stec.transforms import ArchitectureConfig  # noqa: E402

torch.set_num_threads(1)

TOY_CFG = ArchitectureConfig(n=2, K=8, unit_channels=8, in_channels=1)


@pytest.fixture(scope="session")
def toy_cfg():
    return TOY_CFG


@pytest.fixture(scope="session")
def toy_train_patches():
    return easy_patches(200, 16, seed=0)


@pytest.fixture(scope="session")
def toy_eval_images():
    return easy_patches(24, 32, seed=77)


@pytest.fixture(scope="session")
def smooth_eval_images():
    return smooth_patches(8, 32, seed=5)


@pytest.fixture(scope="session")
def twin_models(toy_train_patches):
    """Same-seed twins at lambda=2: beta=0.001 vs beta=0 (criterion 7)."""
    sched = TrainSchedule(
        phase1_max_iters=2000,
        phase_switch_threshold=0.75,
        total_iters=6000,
        learning_rate=5e-4,
        batch_size=8,
        seed=1,
        checkpoint_every=0,
    )
    params_beta, log_beta = train(
        toy_train_patches, TOY_CFG, LossConfig(lam=2.0, beta=0.001), sched
    )
    params_zero, log_zero = train(
        toy_train_patches, TOY_CFG, LossConfig(lam=2.0, beta=0.0), sched
    )
    return {
        "beta": (params_beta, log_beta),
        "zero": (params_zero, log_zero),
        "schedule": sched,
    }


@pytest.fixture(scope="session")
def ladder_models(toy_train_patches):
    """High-rate penalty base (lambda=64, beta=0.001) fine-tuned down the
    lambda ladder with beta=0 (criterion 10 and the documented workflow)."""
    base_sched = TrainSchedule(
        phase1_max_iters=2500,
        phase_switch_threshold=0.6,
        total_iters=4000,
        learning_rate=5e-4,
        batch_size=8,
        seed=1,
        checkpoint_every=0,
    )
    base, base_log = train(
        toy_train_patches, TOY_CFG, LossConfig(lam=64.0, beta=0.001), base_sched
    )
    models = {}
    for lam in (2, 4, 8, 16, 32, 64):
        sched = TrainSchedule(
            phase1_max_iters=0,
            total_iters=800,
            learning_rate=5e-4,
            batch_size=8,
            seed=10 + lam,
            checkpoint_every=0,
        )
        params, _ = finetune_lambda(base, TOY_CFG, float(lam), toy_train_patches, sched)
        models[lam] = params
    return {"base": base, "base_log": base_log, "ladder": models}


def rd_eval(params, cfg, images):
    """Mean (bpp, MS-SSIM, MS-SSIM dB) of real encodes over an eval set."""
    codec = ImageCodec(params, cfg)
    bpps, scores = [], []
    for img in images:
        payload = codec.encode(img)
        recon = codec.decode(payload, img.height, img.width)
        bpps.append(8 * len(payload) / (img.height * img.width))
        scores.append(ms_ssim(img, recon))
    mean_ssim = float(np.mean(scores))
    return float(np.mean(bpps)), mean_ssim, msssim_to_db(mean_ssim)
