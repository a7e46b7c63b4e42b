"""Shared pytest fixtures for freeze-guard tests."""

import numpy as np
import pytest

from src.config import merge_config
from src.diffusion.data import gen_class_data
from src.diffusion.model import ToyDiffusion
from src.models import ClassSplit, Dataset, DenoiserSpec, default_class_layout
from src.param_store import ParamSet
from src.seeding import make_rng

TINY_SPEC = DenoiserSpec(data_dim=2, hidden_dim=8, num_blocks=2, num_classes=4, embed_dim=8)


@pytest.fixture
def tiny_spec() -> DenoiserSpec:
    """Tiny denoiser: 17 tensors, fast enough for per-element checks."""
    return TINY_SPEC


@pytest.fixture
def tiny_model() -> ToyDiffusion:
    """Tiny denoiser with a short 20-step schedule."""
    return ToyDiffusion.build(TINY_SPEC, num_steps=20)


@pytest.fixture
def class_layout():
    """Default 4-class layout on a circle."""
    return default_class_layout(4)


@pytest.fixture
def tiny_data(class_layout) -> Dataset:
    """32 samples per class."""
    return gen_class_data(class_layout, 32, seed=0, stream="test")


@pytest.fixture
def tiny_split(tiny_data) -> ClassSplit:
    """Classes 0 and 1 illegal, classes 2 and 3 legal."""
    return ClassSplit.from_dataset(tiny_data, [0, 1], [2, 3])


@pytest.fixture
def theta_pre(tiny_model) -> ParamSet:
    """Seeded tiny-model parameters standing in for a pre-trained model."""
    return tiny_model.init_params(0)


@pytest.fixture
def theta_ft(theta_pre) -> ParamSet:
    """Perturbed copy of theta_pre standing in for a fine-tuned model."""
    rng = make_rng(0, "test/ft")
    return theta_pre.map(lambda t: t + 0.05 * rng.standard_normal(t.shape))


@pytest.fixture
def scalar_params():
    """Factory for single-tensor ParamSets."""

    def make(value, name: str = "w") -> ParamSet:
        return ParamSet({name: np.asarray(value, dtype=np.float64)})

    return make


@pytest.fixture
def tiny_config() -> dict:
    """Merged config for a pipeline that runs in seconds."""
    return merge_config(
        {
            "data": {"n_pretrain": 24, "n_mask": 16, "n_attack": 16, "n_holdout": 24},
            "model": {"hidden_dim": 8, "num_blocks": 2, "embed_dim": 8},
            "schedule": {"num_steps": 20},
            "pretrain": {"steps": 30, "batch_size": 16, "log_every": 0},
            "finetune": {"steps": 10, "batch_size": 8, "log_every": 0},
            "bilevel": {"outer_steps": 3, "inner_steps": 2, "batch_size": 8, "log_every": 0},
            "attack": {"steps": 10, "log_every": 0},
            "eval": {"n_samples": 20},
            "sweep": {"ratios": [0.0, 0.5], "seeds": [0, 1]},
        }
    )
