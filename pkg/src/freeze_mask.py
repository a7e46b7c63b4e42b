"""Trainable tensor-freezing mask.

The mask over N tensors is relaxed to ``m(w) = sigmoid(w / T)`` and pushed
toward a target freezing ratio by ``(mean(m) - rho)^2``. The upper-level
step moves each logit by the first-order hypergradient through the blend
``theta(m) = m * theta_pre + (1 - m) * theta_ft``, whose derivative with
respect to ``m_i`` is ``theta_d_i = theta_pre_i - theta_ft_i``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from src.exceptions import ConfigError, DimensionError
from src.fileio import atomic_write_json
from src.models import BinaryMask, MaskParams
from src.param_store import ParamDelta, ParamSet, tensor_dot
from src.seeding import make_rng

logger = logging.getLogger(__name__)

MASK_FILE_VERSION = 1
INIT_LOGIT_LOW = -3.0
INIT_LOGIT_HIGH = -2.0


def continuous_mask(mp: MaskParams) -> NDArray[np.float64]:
    """``m_i = sigmoid(w_i / T)`` (overflow-safe)."""
    return expit(mp.w / mp.temperature)


def _sigmoid_slope(mp: MaskParams) -> NDArray[np.float64]:
    """``d m_i / d w_i = (1/T) * s * (1 - s)`` with ``s = sigmoid(w_i / T)``."""
    s = continuous_mask(mp)
    return s * (1.0 - s) / mp.temperature


def sparsity_loss(m: NDArray[np.float64], rho: float) -> float:
    """``(mean(m) - rho)^2``."""
    m = np.asarray(m, dtype=np.float64)
    return float((np.mean(m) - rho) ** 2)


def sparsity_grad(m: NDArray[np.float64], rho: float, mp: MaskParams) -> NDArray[np.float64]:
    """Gradient of sparsity_loss(continuous_mask(mp), rho) with respect to the logits."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != mp.w.shape:
        raise DimensionError(f"Mask length {m.shape} does not match logits {mp.w.shape}")
    n = m.shape[0]
    return 2.0 * (np.mean(m) - rho) / n * _sigmoid_slope(mp)


def logit_gradient(
    mp: MaskParams, upper_grad: ParamSet, theta_d: ParamDelta
) -> NDArray[np.float64]:
    """Per-logit gradient of the upper objective.

    ``<dL/dtheta(m)_i, theta_d_i> * dm_i/dw_i + lambda_s * d sparsity / dw_i``

    Args:
        mp: Current mask parameters
        upper_grad: Gradient of the scalarized upper loss at theta(m)
        theta_d: theta_pre - theta_ft

    Returns:
        Gradient array of length N
    """
    upper_grad.check_congruent(theta_d)
    if len(upper_grad) != len(mp):
        raise DimensionError(
            f"Mask has {len(mp)} logits but the model has {len(upper_grad)} tensors"
        )
    inner = np.array([tensor_dot(upper_grad, theta_d, i) for i in range(len(mp))])
    grad = inner * _sigmoid_slope(mp)
    if mp.sparsity_weight:
        grad = grad + mp.sparsity_weight * sparsity_grad(
            continuous_mask(mp), mp.target_ratio, mp
        )
    return grad


def upper_logit_step(
    mp: MaskParams, upper_grad: ParamSet, theta_d: ParamDelta, eta1: float
) -> MaskParams:
    """One gradient step on the logits; returns new MaskParams."""
    if eta1 < 0:
        raise ConfigError(f"eta1 must be >= 0, got {eta1}")
    updated = mp.copy()
    if eta1 == 0:
        return updated
    updated.w = mp.w - eta1 * logit_gradient(mp, upper_grad, theta_d)
    return updated


def round_mask(mp: MaskParams) -> BinaryMask:
    """Freeze tensor ``i`` iff ``sigmoid(w_i / T) >= 0.5``, i.e. ``w_i >= 0``."""
    return BinaryMask(tuple(int(v) for v in (mp.w >= 0.0)))


def init_logits(
    n: int,
    temperature: float,
    seed: int,
    target_ratio: float = 0.3,
    sparsity_weight: float = 1.0,
) -> MaskParams:
    """Random negative logits so the continuous mask starts near zero."""
    if n < 1:
        raise ConfigError(f"Tensor count must be >= 1, got {n}")
    rng = make_rng(seed, "mask/init")
    w = rng.uniform(INIT_LOGIT_LOW, INIT_LOGIT_HIGH, size=n)
    return MaskParams(w, temperature, target_ratio, sparsity_weight)


# ---------------------------------------------------------------- mask file


@dataclass
class MaskFile:
    """Contents of mask.json."""

    tensor_names: list[str]
    mask: MaskParams | None
    bits: BinaryMask

    def to_dict(self) -> dict:
        return {
            "version": MASK_FILE_VERSION,
            "temperature": self.mask.temperature if self.mask else None,
            "target_ratio": self.mask.target_ratio if self.mask else None,
            "tensor_names": list(self.tensor_names),
            "logits": [float(v) for v in self.mask.w] if self.mask else [],
            "bits": list(self.bits.bits),
            "achieved_ratio": self.bits.achieved_ratio,
        }

    def check_names(self, params: ParamSet) -> None:
        """Raise DimensionError unless the mask indexes ``params`` tensor-by-tensor."""
        if list(self.tensor_names) != params.names:
            for i, (a, b) in enumerate(zip(self.tensor_names, params.names)):
                if a != b:
                    raise DimensionError(f"Mask tensor {i} is {a!r} but the model has {b!r}")
            raise DimensionError(
                f"Mask covers {len(self.tensor_names)} tensors, model has {len(params)}"
            )


def save_mask(
    path: str | Path, tensor_names: list[str], mp: MaskParams | None, bits: BinaryMask
) -> Path:
    if len(tensor_names) != len(bits) or (mp is not None and len(mp) != len(bits)):
        raise DimensionError("Mask names, logits and bits must have the same length")
    return atomic_write_json(path, MaskFile(list(tensor_names), mp, bits).to_dict())


def load_mask(path: str | Path) -> MaskFile:
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if data.get("version") != MASK_FILE_VERSION:
        raise ConfigError(f"{path}: unsupported mask file version {data.get('version')!r}")
    names = list(data["tensor_names"])
    bits = BinaryMask(tuple(int(b) for b in data["bits"]))
    if len(bits) != len(names):
        raise DimensionError(f"{path}: {len(bits)} bits for {len(names)} tensors")
    mp = None
    if data.get("logits"):
        mp = MaskParams(
            np.asarray(data["logits"], dtype=np.float64),
            temperature=float(data["temperature"]),
            target_ratio=float(data["target_ratio"]),
        )
        if len(mp) != len(names):
            raise DimensionError(f"{path}: {len(mp)} logits for {len(names)} tensors")
    return MaskFile(names, mp, bits)
