"""Bilevel mask learning over the compact representation.

Only two weight sets are kept: ``theta_m`` (the blended model the
simulated user fine-tunes) and ``theta_d = theta_pre - theta_ft``. The
lower level fine-tunes ``theta_ft`` through the blend; the upper level
moves the mask logits by the first-order hypergradient. Each outer
iteration runs ``L`` lower steps and one upper step, and fine-tuned
weights carry over to the next iteration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from src.diffusion.model import ToyDiffusion
from src.exceptions import ConfigError, DimensionError, NumericalError
from src.freeze_mask import (
    continuous_mask,
    init_logits,
    round_mask,
    sparsity_loss,
    upper_logit_step,
)
from src.models import Batch, BilevelConfig, BinaryMask, ClassSplit, Dataset, MaskParams
from src.optim import train_loop
from src.param_store import ParamDelta, ParamSet, axpy_tensor, blend
from src.seeding import make_rng

logger = logging.getLogger(__name__)

Batches = tuple[Batch, Batch]


def auto_lambdas(n_illegal: int, n_legal: int) -> tuple[float, float]:
    """Weights inversely proportional to each side's sample count, summing to 2."""
    if n_illegal < 1 or n_legal < 1:
        raise ConfigError(f"Both sample counts must be >= 1, got ({n_illegal}, {n_legal})")
    total = n_illegal + n_legal
    return (2.0 * n_legal / total, 2.0 * n_illegal / total)


def resolve_lambdas(config: BilevelConfig, split: ClassSplit) -> tuple[float, float]:
    auto1, auto2 = auto_lambdas(*split.counts)
    lambda1 = auto1 if config.lambda1 == "auto" else float(config.lambda1)
    lambda2 = auto2 if config.lambda2 == "auto" else float(config.lambda2)
    return lambda1, lambda2


# ------------------------------------------------------------------- state


@dataclass
class BilevelState:
    """Compact-representation state.

    ``applied`` is the continuous mask that ``theta_m`` currently blends
    with, so ``theta_m = theta_ft + applied * theta_d`` for the implied
    ``theta_ft``.
    """

    theta_m: ParamSet
    theta_d: ParamDelta
    mask: MaskParams
    applied: NDArray[np.float64]
    outer_step: int = 0
    inner_step: int = 0

    @classmethod
    def initial(cls, theta_pre: ParamSet, theta_ft: ParamSet, mask: MaskParams) -> BilevelState:
        """``theta_d = theta_pre - theta_ft``, ``theta_m = theta_ft``, blend mask zero."""
        theta_pre.check_congruent(theta_ft)
        if len(mask) != len(theta_pre):
            raise DimensionError(
                f"Mask has {len(mask)} logits but the model has {len(theta_pre)} tensors"
            )
        return cls(
            theta_m=theta_ft.copy(),
            theta_d=ParamDelta.between(theta_pre, theta_ft),
            mask=mask.copy(),
            applied=np.zeros(len(mask)),
        )


def rebase_mask(state: BilevelState, m_new: NDArray[np.float64]) -> BilevelState:
    """Re-express ``theta_m`` for a new continuous mask.

    ``theta_m += (m_new - m_old) * theta_d``; tensors whose mask value is
    unchanged are not touched.
    """
    m_new = np.asarray(m_new, dtype=np.float64)
    if m_new.shape != state.applied.shape:
        raise DimensionError(f"Mask length {m_new.shape} does not match {state.applied.shape}")
    for i, (old, new) in enumerate(zip(state.applied, m_new)):
        if new != old:
            axpy_tensor(state.theta_m, i, float(new - old), state.theta_d.tensor(i))
    state.applied = m_new.copy()
    return state


def lower_step(state: BilevelState, grad: ParamSet, eta2: float) -> BilevelState:
    """Fine-tune ``theta_ft`` through the blend, in compact form.

    For every tensor, with one snapshot of ``m`` and ``g``::

        theta_d_i += eta2 * g_i * (1 - m_i)
        theta_m_i -= eta2 * g_i * (1 - m_i)^2
    """
    state.theta_m.check_congruent(grad)
    m = continuous_mask(state.mask)
    if not np.array_equal(m, state.applied):
        rebase_mask(state, m)
    for i, mi in enumerate(m):
        keep = 1.0 - mi
        if keep == 0.0 or eta2 == 0.0:
            continue
        g = grad.tensor(i)
        axpy_tensor(state.theta_d, i, eta2 * keep, g)
        axpy_tensor(state.theta_m, i, -eta2 * keep * keep, g)
    state.inner_step += 1
    return state


def recover_endpoints(state: BilevelState) -> tuple[ParamSet, ParamSet]:
    """Implied ``(theta_pre, theta_ft)`` of the compact state."""
    theta_ft = ParamSet(
        (name, t - mi * d)
        for (name, t), d, mi in zip(state.theta_m.items(), state.theta_d.tensors(), state.applied)
    )
    theta_pre = ParamSet(
        (name, f + d) for (name, f), d in zip(theta_ft.items(), state.theta_d.tensors())
    )
    return theta_pre, theta_ft


# ------------------------------------------------------------------ losses


def lower_loss(model: ToyDiffusion, theta_m: ParamSet, batches: Batches) -> float:
    """Unweighted sum of illegal and legal diffusion losses."""
    illegal, legal = batches
    return model.loss(theta_m, illegal) + model.loss(theta_m, legal)


def upper_loss(
    model: ToyDiffusion,
    theta_m: ParamSet,
    batches: Batches,
    lambdas: tuple[float, float],
    mask: MaskParams,
    rho: float,
) -> float:
    """``-lambda1 * L(illegal) + lambda2 * L(legal) + lambda_s * sparsity``."""
    illegal, legal = batches
    lambda1, lambda2 = lambdas
    value = 0.0
    if lambda1:
        value -= lambda1 * model.loss(theta_m, illegal)
    if lambda2:
        value += lambda2 * model.loss(theta_m, legal)
    if mask.sparsity_weight:
        value += mask.sparsity_weight * sparsity_loss(continuous_mask(mask), rho)
    return value


def upper_objective(
    model: ToyDiffusion,
    theta_ft: ParamSet,
    theta_d: ParamDelta,
    mask: MaskParams,
    batches: Batches,
    lambdas: tuple[float, float],
) -> float:
    """Upper loss as a function of the logits, holding ``theta_d`` fixed."""
    theta_m = ParamSet(
        (name, f + mi * d)
        for (name, f), d, mi in zip(theta_ft.items(), theta_d.tensors(), continuous_mask(mask))
    )
    return upper_loss(model, theta_m, batches, lambdas, mask, mask.target_ratio)


def upper_gradient(
    model: ToyDiffusion, theta_m: ParamSet, batches: Batches, lambdas: tuple[float, float]
) -> tuple[float, float, ParamSet]:
    """Illegal loss, legal loss and ``d(-l1 L_ill + l2 L_leg)/d theta_m``."""
    illegal, legal = batches
    lambda1, lambda2 = lambdas
    loss_ill, g_ill = model.loss_and_grad(theta_m, illegal)
    loss_leg, g_leg = model.loss_and_grad(theta_m, legal)
    grad = g_ill.scale(-lambda1) + g_leg.scale(lambda2)
    return loss_ill, loss_leg, grad


# --------------------------------------------------------------------- run


@dataclass
class BilevelResult:
    """Output of run()."""

    mask: BinaryMask
    mask_params: MaskParams
    state: BilevelState
    metrics: list[dict] = field(default_factory=list)


def _draw(model: ToyDiffusion, split: ClassSplit, batch_size: int, rng) -> Batches:
    return (
        model.batch(split.illegal, batch_size, rng),
        model.batch(split.legal, batch_size, rng),
    )


def _check_finite(value: float, what: str, outer: int, inner: int) -> None:
    if not math.isfinite(value):
        raise NumericalError(
            f"Non-finite {what} ({value}) at outer step {outer}, inner step {inner}"
        )


def run(
    config: BilevelConfig,
    split: ClassSplit,
    theta_pre: ParamSet,
    theta_ft: ParamSet,
    model: ToyDiffusion,
) -> BilevelResult:
    """Learn a freezing mask.

    Args:
        config: Bilevel hyperparameters
        split: Illegal/legal mask-learning data
        theta_pre: Pre-trained parameters
        theta_ft: Parameters fully fine-tuned on both sides of the split
        model: Architecture and schedule

    Returns:
        BilevelResult with the rounded mask and a per-step metrics log
    """
    model.check_params(theta_pre)
    theta_pre.check_congruent(theta_ft)
    if len(split.illegal) == 0 or len(split.legal) == 0:
        raise ConfigError("Mask learning needs samples on both the illegal and the legal side")

    lambdas = resolve_lambdas(config, split)
    mask = init_logits(
        len(theta_pre),
        config.temperature,
        config.seed,
        target_ratio=config.rho,
        sparsity_weight=config.sparsity_weight,
    )
    state = BilevelState.initial(theta_pre, theta_ft, mask)
    rng = make_rng(config.seed, "bilevel")
    metrics: list[dict] = []
    logger.info(
        "Mask learning: %d tensors, K=%d, L=%d, rho=%.2f, lambdas=(%.3f, %.3f)",
        len(theta_pre),
        config.outer_steps,
        config.inner_steps,
        config.rho,
        *lambdas,
    )

    for k in range(config.outer_steps):
        state.outer_step = k
        rebase_mask(state, continuous_mask(state.mask))
        mask_mean = float(np.mean(state.applied))
        ratio = round_mask(state.mask).achieved_ratio

        for inner in range(config.inner_steps):
            illegal, legal = _draw(model, split, config.batch_size, rng)
            loss_ill, g_ill = model.loss_and_grad(state.theta_m, illegal)
            loss_leg, g_leg = model.loss_and_grad(state.theta_m, legal)
            _check_finite(loss_ill + loss_leg, "lower loss", k, inner)
            lower_step(state, g_ill + g_leg, config.eta2)
            metrics.append(
                {
                    "phase": "lower",
                    "outer": k,
                    "inner": inner,
                    "loss": loss_ill + loss_leg,
                    "illegal_loss": loss_ill,
                    "legal_loss": loss_leg,
                    "mask_mean": mask_mean,
                    "achieved_ratio": ratio,
                }
            )

        batches = _draw(model, split, config.batch_size, rng)
        loss_ill, loss_leg, grad = upper_gradient(model, state.theta_m, batches, lambdas)
        value = (
            -lambdas[0] * loss_ill
            + lambdas[1] * loss_leg
            + state.mask.sparsity_weight * sparsity_loss(state.applied, config.rho)
        )
        _check_finite(value, "upper loss", k, config.inner_steps)
        state.mask = upper_logit_step(state.mask, grad, state.theta_d, config.eta1)
        if not np.isfinite(state.mask.w).all():
            raise NumericalError(f"Mask logits became non-finite at outer step {k}")
        rebase_mask(state, continuous_mask(state.mask))

        mask_mean = float(np.mean(state.applied))
        ratio = round_mask(state.mask).achieved_ratio
        metrics.append(
            {
                "phase": "upper",
                "outer": k,
                "inner": config.inner_steps,
                "loss": value,
                "illegal_loss": loss_ill,
                "legal_loss": loss_leg,
                "mask_mean": mask_mean,
                "achieved_ratio": ratio,
            }
        )
        if config.log_every and (k + 1) % config.log_every == 0:
            logger.info(
                "Outer %d/%d: illegal %.4f, legal %.4f, mask mean %.4f, frozen ratio %.3f",
                k + 1,
                config.outer_steps,
                loss_ill,
                loss_leg,
                mask_mean,
                ratio,
            )

    if not state.theta_m.all_finite():
        raise NumericalError("Blended parameters became non-finite during mask learning")
    binary = round_mask(state.mask)
    logger.info("Learned mask: %s", binary)
    return BilevelResult(mask=binary, mask_params=state.mask, state=state, metrics=metrics)


# --------------------------------------------------------------- baselines


def full_finetune(
    theta_init: ParamSet,
    dataset: Dataset,
    lr: float,
    steps: int,
    optimizer: str,
    seed: int,
    model: ToyDiffusion,
    batch_size: int = 16,
    log_every: int = 0,
) -> ParamSet:
    """Fine-tune every tensor (the unmasked baseline, and the source of theta_ft)."""
    return train_loop(
        model,
        theta_init,
        dataset,
        lr=lr,
        steps=steps,
        batch_size=batch_size,
        optimizer=optimizer,  # type: ignore[arg-type]
        seed=seed,
        log_every=log_every,
        label="full fine-tune",
    ).params


def release(theta_pre: ParamSet, theta_ft: ParamSet, mask: BinaryMask) -> ParamSet:
    """Released model: frozen tensors carry ``theta_pre``, the rest ``theta_ft``."""
    return blend(theta_pre, theta_ft, mask.as_array())
