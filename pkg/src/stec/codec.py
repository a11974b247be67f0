"""End-to-end still-image coding: transforms + hard quantization + range
coding against the factorized model's tables.

An ImageCodec is built once from model parameters and reused; its coding
tables are integer-quantized, so encode/decode are byte-deterministic.
"""

import numpy as np
import torch

from stec.entropy_model import FactorizedModel, build_cdf_tables, range_decode, range_encode
from stec.errors import StecError
from stec.media_io import MODE_RESIDUAL, MODE_STANDARD, ImageTensor
from stec.quantization import QuantizerSpec, quantize_test
from stec.transforms import LatentTensor, TransformPair, model_content_hash, to_torch


class ImageCodec:
    def __init__(self, params, cfg, quant=None):
        self.cfg = cfg
        self.quant = quant or QuantizerSpec()
        self.pair = TransformPair(cfg, params)
        self.model = FactorizedModel(
            cfg.K,
            support=(self.quant.c_min, self.quant.c_max),
            widths=cfg.entropy_widths,
        )
        if params.entropy.size:
            self.model.load_param_vector(params.entropy)
        self.tables = build_cdf_tables(self.model)
        self.model_hash = model_content_hash(params, cfg)

    def latent_shape(self, height, width):
        d = 1 << self.cfg.n
        if height % d or width % d:
            raise StecError(f"image dims {height}x{width} not divisible by {d}")
        return height // d, width // d, self.cfg.K

    def encode(self, img):
        """Image -> payload bytes (latent symbols only; dims travel in the
        container header)."""
        if img.channels != self.cfg.in_channels:
            raise StecError(
                f"image has {img.channels} channels, model expects {self.cfg.in_channels}"
            )
        x = to_torch(img.samples).permute(2, 0, 1)[None]
        with torch.no_grad():
            y = self.pair.analyze_tensor(x)
        latent = y[0].permute(1, 2, 0).numpy()
        q = quantize_test(latent, self.quant)
        symbols = (q - self.quant.c_min).astype(np.int32)
        return range_encode(symbols, self.tables)

    def decode(self, payload, height, width, mode=MODE_STANDARD):
        """Payload -> reconstructed image, clamped to the nominal range."""
        shape = self.latent_shape(height, width)
        symbols = range_decode(payload, self.tables, shape[0] * shape[1] * shape[2], shape=shape)
        latent = symbols.astype(np.float64) + self.quant.c_min
        y = to_torch(latent).permute(2, 0, 1)[None]
        with torch.no_grad():
            x = self.pair.synthesize_tensor(y)
        samples = np.clip(x[0].permute(1, 2, 0).numpy(), 0.0, 1.0)
        if mode == MODE_RESIDUAL:
            return ImageTensor(samples * 2.0 - 1.0, mode=MODE_RESIDUAL)
        return ImageTensor(samples)

    def estimate_bits(self, img):
        """Model-estimated bits for the quantized latent of an image."""
        from stec.entropy_model import estimate_rate

        x = to_torch(img.samples).permute(2, 0, 1)[None]
        with torch.no_grad():
            y = self.pair.analyze_tensor(x)
        q = quantize_test(y[0].permute(1, 2, 0).numpy(), self.quant)
        return estimate_rate(LatentTensor(q), self.model)


def encode_residual(codec, residual):
    """Residual plane in [-1,1] -> payload via the standard-range codec."""
    mapped = ImageTensor((residual.samples + 1.0) * 0.5)
    return codec.encode(mapped)


def decode_residual(codec, payload, height, width):
    return codec.decode(payload, height, width, mode=MODE_RESIDUAL)
