"""The VAE half on its own: KL, sampling, and reconstruction probability."""

import numpy as np

from ssvtcn.nn_core import Rng, Tensor
from ssvtcn.vae import (
    LatentGaussian, VaeConfig, gaussian_log_likelihood, init_vae, kl_divergence,
    reparameterize, vae_forward,
)

g = LatentGaussian(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))))
print("KL at the prior:", kl_divergence(g).item())
g = LatentGaussian(Tensor(np.full((1, 4), 0.5)), Tensor(np.full((1, 4), -1.0)))
print(f"KL away from it: {kl_divergence(g).item():.4f}")

draws = np.random.default_rng(0).normal(size=(10_000, 4))
samples = reparameterize(LatentGaussian(Tensor(np.full((10_000, 4), 0.5)),
                                        Tensor(np.full((10_000, 4), -1.0))), draws)
print("sample mean:", np.round(samples.data.mean(axis=0), 3))

# untrained VAE: p^v falls as the raw record drifts from what it can reconstruct
params = init_vae(VaeConfig(input_dim=8, latent_dim=16, raw_dim=3), Rng(0))
embedding = np.random.default_rng(1).normal(size=(1, 8))
out = vae_forward(Tensor(embedding), params)
for shift in (0.0, 1.0, 3.0):
    raw = out.recon_raw.data + shift
    pv = (gaussian_log_likelihood(embedding, out.recon_embedding)
          + gaussian_log_likelihood(raw, out.recon_raw)).item()
    print(f"raw shifted by {shift}: p^v = {pv:.3f}")
