"""Central finite-difference checks of every analytic gradient.

Three suites: the denoiser's parameter gradient, the sparsity penalty's
logit gradient, and the full upper objective's logit gradient through the
blend. Each reports the worst per-tensor relative error
``max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)``.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from src.bilevel import upper_gradient, upper_objective
from src.diffusion.data import gen_class_data
from src.diffusion.model import ToyDiffusion
from src.exceptions import ConfigError, GradientCheckError
from src.freeze_mask import continuous_mask, logit_gradient, sparsity_grad, sparsity_loss
from src.models import ClassSplit, DenoiserSpec, MaskParams, default_class_layout
from src.param_store import ParamDelta, ParamSet
from src.seeding import make_rng

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
SCALE_FLOOR = 1e-8

TINY_SPEC = DenoiserSpec(data_dim=2, hidden_dim=8, num_blocks=2, num_classes=4, embed_dim=8)


@dataclass
class CheckResult:
    """Outcome of one suite."""

    name: str
    max_rel_error: float
    worst: str
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "max_rel_error": self.max_rel_error,
            "worst": self.worst,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def relative_error(analytic: NDArray[np.float64], numeric: NDArray[np.float64]) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(
        float(np.max(np.abs(analytic), initial=0.0)),
        float(np.max(np.abs(numeric), initial=0.0)),
        SCALE_FLOOR,
    )
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def numeric_gradient(
    fn: Callable[[NDArray[np.float64]], float], x: NDArray[np.float64], h: float = DEFAULT_STEP
) -> NDArray[np.float64]:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for j in range(flat.size):
        saved = flat[j]
        flat[j] = saved + h
        f_plus = fn(x)
        flat[j] = saved - h
        f_minus = fn(x)
        flat[j] = saved
        out[j] = (f_plus - f_minus) / (2.0 * h)
    return grad


def check_diffusion_grad(
    model: ToyDiffusion, params: ParamSet, split: ClassSplit, seed: int, h: float, tol: float
) -> CheckResult:
    rng = make_rng(seed, "gradcheck/diffusion")
    batch = model.batch(split.illegal, 8, rng)
    _, analytic = model.loss_and_grad(params, batch)

    worst_err, worst_name = 0.0, ""
    for i, name in enumerate(params.names):
        shifted = params.copy()

        def loss_at(value: NDArray[np.float64], i: int = i) -> float:
            shifted.set_tensor(shifted.name_at(i), value)
            return model.loss(shifted, batch)

        numeric = numeric_gradient(loss_at, params.tensor(i), h)
        err = relative_error(analytic.tensor(i), numeric)
        logger.debug("diffusion_grad %s: rel err %.3e", name, err)
        if err >= worst_err:
            worst_err, worst_name = err, name
    return CheckResult("diffusion_grad", worst_err, worst_name, tol)


def check_sparsity_grad(n: int, seed: int, h: float, tol: float) -> CheckResult:
    rng = make_rng(seed, "gradcheck/sparsity")
    mp = MaskParams(rng.uniform(-0.5, 0.5, size=n), temperature=0.2, target_ratio=0.3)
    analytic = sparsity_grad(continuous_mask(mp), mp.target_ratio, mp)

    def loss_at(w: NDArray[np.float64]) -> float:
        shifted = MaskParams(w, mp.temperature, mp.target_ratio)
        return sparsity_loss(continuous_mask(shifted), mp.target_ratio)

    numeric = numeric_gradient(loss_at, mp.w, h)
    return CheckResult("sparsity_grad", relative_error(analytic, numeric), "logits", tol)


def check_upper_logit_grad(
    model: ToyDiffusion,
    theta_pre: ParamSet,
    theta_ft: ParamSet,
    split: ClassSplit,
    seed: int,
    h: float,
    tol: float,
) -> CheckResult:
    rng = make_rng(seed, "gradcheck/upper")
    batches = (model.batch(split.illegal, 8, rng), model.batch(split.legal, 8, rng))
    lambdas = (0.8, 1.2)
    mp = MaskParams(
        rng.uniform(-0.5, 0.5, size=len(theta_pre)),
        temperature=0.2,
        target_ratio=0.3,
        sparsity_weight=1.0,
    )
    theta_d = ParamDelta.between(theta_pre, theta_ft)
    theta_m = ParamSet(
        (name, f + mi * d)
        for (name, f), d, mi in zip(theta_ft.items(), theta_d.tensors(), continuous_mask(mp))
    )
    _, _, upper_grad = upper_gradient(model, theta_m, batches, lambdas)
    analytic = logit_gradient(mp, upper_grad, theta_d)

    def objective_at(w: NDArray[np.float64]) -> float:
        shifted = MaskParams(w, mp.temperature, mp.target_ratio, mp.sparsity_weight)
        return upper_objective(model, theta_ft, theta_d, shifted, batches, lambdas)

    numeric = numeric_gradient(objective_at, mp.w, h)
    return CheckResult("upper_logit_grad", relative_error(analytic, numeric), "logits", tol)


def run_gradcheck(
    spec: DenoiserSpec = TINY_SPEC,
    seed: int = 0,
    h: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOLERANCE,
) -> list[CheckResult]:
    """Run every suite on a seeded model and data draw.

    Args:
        spec: Architecture to check (the tiny spec by default)
        seed: Seed for parameters, data and batches
        h: Finite-difference step
        tol: Maximum accepted relative error

    Returns:
        One CheckResult per suite
    """
    if spec.num_classes < 2:
        raise ConfigError("Gradient checks need at least two classes")
    model = ToyDiffusion.build(spec, num_steps=20)
    classes = default_class_layout(spec.num_classes)
    data = gen_class_data(classes, 16, seed, stream="gradcheck")
    half = spec.num_classes // 2
    split = ClassSplit.from_dataset(
        data, list(range(half)), list(range(half, spec.num_classes))
    )

    theta_pre = model.init_params(seed)
    noise = make_rng(seed, "gradcheck/ft")
    theta_ft = theta_pre.map(lambda t: t + 0.1 * noise.standard_normal(t.shape))

    results = [
        check_diffusion_grad(model, theta_pre, split, seed, h, tol),
        check_sparsity_grad(len(theta_pre), seed, h, tol),
        check_upper_logit_grad(model, theta_pre, theta_ft, split, seed, h, tol),
    ]
    for r in results:
        status = "ok" if r.passed else "FAILED"
        logger.info("%s: max rel err %.3e (%s) %s", r.name, r.max_rel_error, r.worst, status)
    return results


def assert_gradients(results: list[CheckResult]) -> None:
    """Raise GradientCheckError naming every failed suite."""
    failed = [r for r in results if not r.passed]
    if failed:
        detail = ", ".join(f"{r.name} {r.max_rel_error:.3e} at {r.worst}" for r in failed)
        raise GradientCheckError(f"Gradient check failed: {detail}")
