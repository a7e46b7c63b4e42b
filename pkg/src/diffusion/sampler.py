"""Ancestral (DDPM) sampling."""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray

from src.diffusion.denoiser import denoiser_forward
from src.diffusion.schedule import NoiseSchedule
from src.exceptions import ConfigError, DimensionError
from src.models import DenoiserSpec
from src.param_store import ParamSet
from src.seeding import make_rng


def sample(
    params: ParamSet,
    labels: int | NDArray[np.int64],
    schedule: NoiseSchedule,
    spec: DenoiserSpec,
    n: int,
    seed: int,
) -> NDArray[np.float64]:
    """Generate ``n`` samples by iterating the reverse update from pure noise.

    Each step computes
    ``x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sqrt(beta_t) z``
    with no noise added on the final step.

    Args:
        params: Denoiser parameters
        labels: One class label for all samples, or ``n`` labels
        schedule: Noise schedule
        spec: Denoiser architecture
        n: Number of samples (>= 1)
        seed: Sampling seed

    Returns:
        ``[n, data_dim]`` array
    """
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    y = np.asarray(labels, dtype=np.int64)
    if y.ndim == 0:
        y = np.full(n, int(y), dtype=np.int64)
    if y.shape != (n,):
        raise DimensionError(f"Expected {n} labels, got shape {y.shape}")

    rng = make_rng(seed, "sample")
    x = rng.standard_normal((n, spec.data_dim))
    for t in range(schedule.num_steps, 0, -1):
        beta = schedule.beta[t - 1]
        alpha = schedule.alpha[t - 1]
        abar = schedule.alpha_bar[t - 1]
        steps = np.full(n, t, dtype=np.int64)
        eps_hat = denoiser_forward(params, x, steps, y, spec)
        x = (x - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
        if t > 1:
            x = x + np.sqrt(beta) * rng.standard_normal(x.shape)
    return x
