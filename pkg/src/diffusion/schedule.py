"""Linear noise schedule and the forward noising process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from src.exceptions import ConfigError, DimensionError, IndexRangeError

DEFAULT_NUM_STEPS = 100
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta, alpha and cumulative alpha_bar.

    Arrays are indexed by ``t - 1`` for steps ``t = 1..num_steps``.
    """

    beta: NDArray[np.float64]
    alpha: NDArray[np.float64]
    alpha_bar: NDArray[np.float64]

    @property
    def num_steps(self) -> int:
        return int(self.beta.shape[0])

    def check_steps(self, t: NDArray[np.int64] | int) -> NDArray[np.int64]:
        """Validate 1-based step indices and return them as an array."""
        steps = np.asarray(t, dtype=np.int64)
        if steps.size and (steps.min() < 1 or steps.max() > self.num_steps):
            raise IndexRangeError(
                f"Diffusion step out of range [1, {self.num_steps}]: "
                f"min {steps.min()}, max {steps.max()}"
            )
        return steps

    def to_dict(self) -> dict:
        return {
            "num_steps": self.num_steps,
            "beta_start": float(self.beta[0]),
            "beta_end": float(self.beta[-1]),
        }


def make_schedule(
    num_steps: int = DEFAULT_NUM_STEPS,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linear beta schedule, inclusive of both endpoints.

    Args:
        num_steps: Number of diffusion steps (>= 1)
        beta_start: First beta, in (0, 1)
        beta_end: Last beta, in [beta_start, 1)

    Returns:
        NoiseSchedule
    """
    if not isinstance(num_steps, int) or num_steps < 1:
        raise ConfigError(f"num_steps must be a positive integer, got {num_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(
            f"Schedule requires 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    beta = (
        np.array([beta_start], dtype=np.float64)
        if num_steps == 1
        else np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    )
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def forward_noise(
    x0: NDArray[np.float64],
    eps: NDArray[np.float64],
    t: NDArray[np.int64] | int,
    schedule: NoiseSchedule,
) -> NDArray[np.float64]:
    """``x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`` per sample."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 shape {x0.shape} does not match eps shape {eps.shape}")
    steps = schedule.check_steps(t)
    abar = schedule.alpha_bar[steps - 1]
    if x0.ndim == 2:
        abar = np.broadcast_to(abar, (x0.shape[0],))[:, None]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def gaussian_loss_floor(
    schedule: NoiseSchedule,
    std: float,
    data_dim: int,
    t: NDArray[np.int64] | None = None,
) -> float:
    """Lowest expected noise-prediction loss on an isotropic Gaussian class.

    With ``x0 ~ N(mu, std^2 I)`` the best possible prediction is the posterior
    mean of the noise, which leaves ``abar std^2 / (abar std^2 + 1 - abar)``
    per dimension at step ``t``. The result averages this over ``t`` (every
    step when None).
    """
    steps = np.arange(1, schedule.num_steps + 1) if t is None else schedule.check_steps(t)
    abar = schedule.alpha_bar[steps - 1]
    s2 = std**2
    return float(data_dim * np.mean(abar * s2 / (abar * s2 + 1.0 - abar)))
