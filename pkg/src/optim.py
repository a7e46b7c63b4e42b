"""Optimizers over ParamSets and the shared fine-tuning loop.

Frozen tensors are skipped entirely: the optimizer never writes to them,
so they stay byte-identical however many steps run.
"""

from __future__ import annotations

import logging
import math
import time
from abc import ABC, abstractmethod
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from src.diffusion.model import ToyDiffusion
from src.exceptions import ConfigError, DimensionError, NumericalError
from src.models import Dataset, OptimizerName
from src.param_store import ParamSet, axpy_tensor
from src.seeding import make_rng

logger = logging.getLogger(__name__)


class Optimizer(ABC):
    """Base class for in-place optimizers with a per-tensor frozen flag."""

    def __init__(self, lr: float, frozen: Sequence[bool] | None = None):
        """Initialize optimizer.

        Args:
            lr: Learning rate (> 0)
            frozen: Per-tensor flags; True tensors are never updated
        """
        if not lr > 0:
            raise ConfigError(f"Learning rate must be > 0, got {lr}")
        self.lr = lr
        self.frozen = list(frozen) if frozen is not None else None

    def _trainable(self, params: ParamSet) -> list[int]:
        if self.frozen is None:
            return list(range(len(params)))
        if len(self.frozen) != len(params):
            raise DimensionError(
                f"Frozen flags cover {len(self.frozen)} tensors, model has {len(params)}"
            )
        return [i for i, f in enumerate(self.frozen) if not f]

    @abstractmethod
    def step(self, params: ParamSet, grads: ParamSet) -> None:
        """Apply one update in place."""
        raise NotImplementedError


class SGD(Optimizer):
    """Plain gradient descent."""

    def step(self, params: ParamSet, grads: ParamSet) -> None:
        params.check_congruent(grads)
        for i in self._trainable(params):
            axpy_tensor(params, i, -self.lr, grads.tensor(i))


class Adam(Optimizer):
    """Adam with bias correction."""

    def __init__(
        self,
        lr: float,
        frozen: Sequence[bool] | None = None,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        super().__init__(lr, frozen)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def step(self, params: ParamSet, grads: ParamSet) -> None:
        params.check_congruent(grads)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i in self._trainable(params):
            g = grads.tensor(i)
            m = self._m.setdefault(i, np.zeros_like(g))
            v = self._v.setdefault(i, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            axpy_tensor(params, i, -self.lr, update)


def make_optimizer(
    name: OptimizerName, lr: float, frozen: Sequence[bool] | None = None
) -> Optimizer:
    if name == "sgd":
        return SGD(lr, frozen)
    if name == "adam":
        return Adam(lr, frozen)
    raise ConfigError(f"Unknown optimizer {name!r}")


@dataclass
class TrainResult:
    """Output of train_loop."""

    params: ParamSet
    losses: list[float] = field(default_factory=list)
    sec_per_step: float = 0.0


def train_loop(
    model: ToyDiffusion,
    params: ParamSet,
    data: Dataset,
    lr: float,
    steps: int,
    batch_size: int,
    optimizer: OptimizerName,
    seed: int,
    frozen: Sequence[bool] | None = None,
    stream: str = "finetune",
    log_every: int = 0,
    label: str = "train",
) -> TrainResult:
    """Minimize the diffusion loss on ``data``; returns a new ParamSet.

    Args:
        model: Architecture and schedule
        params: Starting parameters (not modified)
        data: Training samples
        lr: Learning rate
        steps: Number of optimizer steps (0 returns a copy)
        batch_size: Samples per step
        optimizer: ``"sgd"`` or ``"adam"``
        seed: Seed for the batch stream
        frozen: Optional per-tensor frozen flags
        stream: Random stream name
        log_every: Log progress every N steps (0 disables)
        label: Name used in log lines

    Returns:
        TrainResult with per-step losses and mean wall time per step
    """
    if steps < 0:
        raise ConfigError(f"steps must be >= 0, got {steps}")
    model.check_params(params)
    current = params.copy()
    if steps == 0:
        return TrainResult(current)

    opt = make_optimizer(optimizer, lr, frozen)
    rng = make_rng(seed, stream)
    losses: list[float] = []
    start = time.perf_counter()
    for step in range(1, steps + 1):
        batch = model.batch(data, batch_size, rng)
        loss, grads = model.loss_and_grad(current, batch)
        if not math.isfinite(loss):
            raise NumericalError(f"{label}: non-finite loss {loss} at step {step}")
        opt.step(current, grads)
        losses.append(loss)
        if log_every and step % log_every == 0:
            recent = float(np.mean(losses[-log_every:]))
            logger.info("%s step %d/%d: loss %.5f", label, step, steps, recent)
    elapsed = time.perf_counter() - start

    if not current.all_finite():
        raise NumericalError(f"{label}: parameters became non-finite")
    return TrainResult(current, losses, elapsed / steps)
