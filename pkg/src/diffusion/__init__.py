"""Toy class-conditional diffusion model.

Desk-scale stand-in for a text-to-image diffusion model: 2-D Gaussian
mixture classes, a residual MLP denoiser with manual gradients, and an
ancestral sampler.
"""

from src.diffusion.data import DataSplits, gen_class_data, generate_splits, sample_batch
from src.diffusion.denoiser import (
    denoiser_forward,
    diffusion_grad,
    diffusion_loss,
    diffusion_loss_and_grad,
    init_params,
)
from src.diffusion.model import ToyDiffusion
from src.diffusion.sampler import sample
from src.diffusion.schedule import (
    NoiseSchedule,
    forward_noise,
    gaussian_loss_floor,
    make_schedule,
)

__all__ = [
    "DataSplits",
    "NoiseSchedule",
    "ToyDiffusion",
    "denoiser_forward",
    "diffusion_grad",
    "diffusion_loss",
    "diffusion_loss_and_grad",
    "forward_noise",
    "gaussian_loss_floor",
    "gen_class_data",
    "generate_splits",
    "init_params",
    "make_schedule",
    "sample",
    "sample_batch",
]
