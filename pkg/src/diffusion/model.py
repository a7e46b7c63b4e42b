"""Architecture plus schedule, bundled for the training and evaluation code."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from src.diffusion.data import sample_batch
from src.diffusion.denoiser import (
    check_params,
    diffusion_loss,
    diffusion_loss_and_grad,
    init_params,
    tensor_layout,
)
from src.diffusion.sampler import sample
from src.diffusion.schedule import NoiseSchedule, make_schedule
from src.models import Batch, Dataset, DenoiserSpec
from src.param_store import ParamSet


@dataclass(frozen=True)
class ToyDiffusion:
    """A denoiser architecture together with its noise schedule."""

    spec: DenoiserSpec
    schedule: NoiseSchedule

    @classmethod
    def build(
        cls,
        spec: DenoiserSpec | None = None,
        num_steps: int = 100,
        beta_start: float = 1e-4,
        beta_end: float = 0.02,
    ) -> ToyDiffusion:
        return cls(spec or DenoiserSpec(), make_schedule(num_steps, beta_start, beta_end))

    @property
    def tensor_names(self) -> list[str]:
        return [name for name, _ in tensor_layout(self.spec)]

    def init_params(self, seed: int) -> ParamSet:
        return init_params(self.spec, seed)

    def check_params(self, params: ParamSet) -> None:
        check_params(params, self.spec)

    def batch(self, data: Dataset, batch_size: int, rng: np.random.Generator) -> Batch:
        return sample_batch(data, batch_size, self.schedule.num_steps, rng)

    def loss(self, params: ParamSet, batch: Batch) -> float:
        return diffusion_loss(params, batch, self.schedule, self.spec)

    def loss_and_grad(self, params: ParamSet, batch: Batch) -> tuple[float, ParamSet]:
        return diffusion_loss_and_grad(params, batch, self.schedule, self.spec)

    def sample(self, params: ParamSet, label: int, n: int, seed: int) -> np.ndarray:
        return sample(params, label, self.schedule, self.spec, n, seed)
