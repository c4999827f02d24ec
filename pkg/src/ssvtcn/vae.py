"""Variational autoencoder over the TCN embedding.

The encoder lifts the embedding (width h) into a wider latent Gaussian
(width z > h).  The decoder shares one hidden layer between two heads: one
reconstructs the embedding, the other reconstructs the raw feature vector of
the window's final record.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn_core import Rng, Tensor, as_tensor, exp, expm1, init_uniform, matmul, mul, relu, square

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class VaeConfig:
    input_dim: int  # h, the TCN channel count
    latent_dim: int  # z
    raw_dim: int  # u
    sigma: float = 1.0

    def __post_init__(self):
        if min(self.input_dim, self.latent_dim, self.raw_dim) < 1:
            raise ValueError("VAE dimensions must be positive")
        if self.latent_dim <= self.input_dim:
            raise ValueError(
                f"latent_dim ({self.latent_dim}) must exceed input_dim ({self.input_dim}): "
                "the encoder maps the embedding to a higher-dimensional latent"
            )
        if not self.sigma > 0:
            raise ValueError("observation sigma must be positive")

    @property
    def hidden_dim(self) -> int:
        return max(self.input_dim, self.latent_dim)


@dataclass
class Linear:
    weight: Tensor  # [in, out]
    bias: Tensor  # [out]

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias

    @classmethod
    def init(cls, rng: Rng, n_in: int, n_out: int) -> Linear:
        return cls(
            init_uniform(rng.child("weight"), (n_in, n_out), n_in),
            init_uniform(rng.child("bias"), (n_out,), n_in),
        )


@dataclass
class VaeParams:
    config: VaeConfig
    enc_hidden: Linear
    enc_mean: Linear
    enc_log_var: Linear
    dec_hidden: Linear
    dec_embedding: Linear
    dec_raw: Linear

    _LAYERS = ("enc_hidden", "enc_mean", "enc_log_var", "dec_hidden", "dec_embedding", "dec_raw")

    def named_parameters(self, prefix: str = "vae"):
        for layer in self._LAYERS:
            lin = getattr(self, layer)
            yield f"{prefix}.{layer}.weight", lin.weight
            yield f"{prefix}.{layer}.bias", lin.bias


def init_vae(config: VaeConfig, rng: Rng) -> VaeParams:
    h, z, u, hid = config.input_dim, config.latent_dim, config.raw_dim, config.hidden_dim
    return VaeParams(
        config=config,
        enc_hidden=Linear.init(rng.child("enc_hidden"), h, hid),
        enc_mean=Linear.init(rng.child("enc_mean"), hid, z),
        enc_log_var=Linear.init(rng.child("enc_log_var"), hid, z),
        dec_hidden=Linear.init(rng.child("dec_hidden"), z, hid),
        dec_embedding=Linear.init(rng.child("dec_embedding"), hid, h),
        dec_raw=Linear.init(rng.child("dec_raw"), hid, u),
    )


@dataclass
class LatentGaussian:
    mean: Tensor
    log_var: Tensor

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_var.data)


@dataclass
class VaeOutput:
    gaussian: LatentGaussian
    sample: Tensor  # Z_t
    recon_embedding: Tensor
    recon_raw: Tensor


def encode(embedding: Tensor, params: VaeParams) -> LatentGaussian:
    embedding = as_tensor(embedding)
    if embedding.shape[-1] != params.config.input_dim:
        raise ValueError(
            f"encoder expects embedding width {params.config.input_dim}, got {embedding.shape[-1]}"
        )
    hidden = relu(params.enc_hidden(embedding))
    return LatentGaussian(params.enc_mean(hidden), params.enc_log_var(hidden))


def reparameterize(g: LatentGaussian, noise) -> Tensor:
    """``mean + exp(log_var / 2) * noise``; the noise is a constant."""
    noise = np.asarray(noise.data if isinstance(noise, Tensor) else noise, dtype=float)
    if noise.shape != g.mean.shape:
        raise ValueError(f"noise shape {noise.shape} does not match latent {g.mean.shape}")
    return g.mean + exp(mul(g.log_var, 0.5)) * noise


def decode(z: Tensor, params: VaeParams) -> tuple[Tensor, Tensor]:
    z = as_tensor(z)
    if z.shape[-1] != params.config.latent_dim:
        raise ValueError(f"decoder expects latent width {params.config.latent_dim}, got {z.shape[-1]}")
    hidden = relu(params.dec_hidden(z))
    return params.dec_embedding(hidden), params.dec_raw(hidden)


def vae_forward(embedding: Tensor, params: VaeParams, noise=None) -> VaeOutput:
    """Encode, sample (``noise=None`` means zero noise, i.e. Z = mean), decode."""
    g = encode(embedding, params)
    if noise is None:
        noise = np.zeros(g.mean.shape)
    z = reparameterize(g, noise)
    recon_embedding, recon_raw = decode(z, params)
    return VaeOutput(g, z, recon_embedding, recon_raw)


def kl_divergence(g: LatentGaussian) -> Tensor:
    """KL(N(mean, exp(log_var)) || N(0, I)), summed over the last axis."""
    # expm1 keeps the variance part >= 0 when log_var is tiny
    terms = square(g.mean) + (expm1(g.log_var) - g.log_var)
    return mul(terms.sum(axis=-1), 0.5)


def gaussian_log_likelihood(target, recon, sigma: float = 1.0) -> Tensor:
    """Isotropic Gaussian log density of ``target`` around ``recon``, summed over the last axis."""
    target, recon = as_tensor(target), as_tensor(recon)
    if target.shape != recon.shape:
        raise ValueError(f"target {target.shape} and reconstruction {recon.shape} differ")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    dim = target.shape[-1]
    const = -0.5 * dim * (LOG_2PI + 2.0 * math.log(sigma))
    sq = square(target - recon).sum(axis=-1)
    return mul(sq, -0.5 / sigma**2) + const


def l_v_loss(embedding, raw, output: VaeOutput, sigma: float = 1.0, include_raw: bool = True) -> Tensor:
    """Batch-mean VAE loss: negative reconstruction log-likelihood plus KL.

    With ``include_raw`` the raw-record head's likelihood is part of the
    reconstruction term, which is what trains that head; without it only the
    embedding reconstruction is scored.
    """
    embedding = as_tensor(embedding)
    if embedding.ndim > 1 and embedding.shape[0] == 0:
        raise ValueError("l_v_loss needs a non-empty batch")
    per_record = -gaussian_log_likelihood(embedding, output.recon_embedding, sigma)
    if include_raw:
        per_record = per_record - gaussian_log_likelihood(raw, output.recon_raw, sigma)
    per_record = per_record + kl_divergence(output.gaussian)
    return per_record.mean()
