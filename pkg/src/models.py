"""Data models for freeze-guard."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np
from numpy.typing import NDArray

from src.exceptions import ConfigError, DimensionError

OptimizerName = Literal["sgd", "adam"]
LambdaValue = float | Literal["auto"]


# ================================================================ data


@dataclass(frozen=True)
class MixtureComponent:
    """Isotropic Gaussian component of a class distribution."""

    mean: tuple[float, ...]
    std: float


@dataclass(frozen=True)
class ClassSpec:
    """Gaussian mixture defining one data class."""

    components: tuple[MixtureComponent, ...]
    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.components:
            raise ConfigError("ClassSpec needs at least one component")
        if len(self.weights) != len(self.components):
            raise ConfigError(
                f"ClassSpec has {len(self.components)} components but {len(self.weights)} weights"
            )
        if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-12:
            raise ConfigError(f"Mixture weights must be nonnegative and sum to 1: {self.weights}")
        dims = {len(c.mean) for c in self.components}
        if len(dims) != 1:
            raise ConfigError(f"Mixture components have different dimensions: {sorted(dims)}")
        for c in self.components:
            if not c.std > 0:
                raise ConfigError(f"Component std must be > 0, got {c.std}")

    @property
    def dim(self) -> int:
        return len(self.components[0].mean)

    @property
    def mean(self) -> NDArray[np.float64]:
        """Mixture mean."""
        means = np.array([c.mean for c in self.components], dtype=np.float64)
        return np.asarray(self.weights, dtype=np.float64) @ means

    @classmethod
    def gaussian(cls, mean: tuple[float, ...], std: float) -> ClassSpec:
        """Single-component class."""
        return cls(components=(MixtureComponent(tuple(mean), std),), weights=(1.0,))

    def to_dict(self) -> dict:
        return {
            "components": [{"mean": list(c.mean), "std": c.std} for c in self.components],
            "weights": list(self.weights),
        }


def default_class_layout(
    num_classes: int = 4, radius: float = 4.0, std: float = 0.35
) -> list[ClassSpec]:
    """Classes with means evenly spaced on a circle in 2-D."""
    specs = []
    for k in range(num_classes):
        angle = 2.0 * math.pi * k / num_classes
        specs.append(ClassSpec.gaussian((radius * math.cos(angle), radius * math.sin(angle)), std))
    return specs


@dataclass
class Dataset:
    """Labelled samples: ``x0`` is ``[n, data_dim]``, ``labels`` is ``[n]``."""

    x0: NDArray[np.float64]
    labels: NDArray[np.int64]

    def __post_init__(self) -> None:
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.x0.ndim != 2 or self.labels.shape != (self.x0.shape[0],):
            raise DimensionError(
                f"Dataset shapes inconsistent: x0 {self.x0.shape}, labels {self.labels.shape}"
            )

    def __len__(self) -> int:
        return int(self.x0.shape[0])

    @property
    def classes(self) -> list[int]:
        return sorted({int(c) for c in self.labels})

    def select(self, classes: list[int] | set[int]) -> Dataset:
        """Rows whose label is in ``classes`` (original order kept)."""
        keep = np.isin(self.labels, list(classes))
        return Dataset(self.x0[keep], self.labels[keep])

    def of_class(self, label: int) -> NDArray[np.float64]:
        return self.x0[self.labels == label]

    @staticmethod
    def concat(parts: list[Dataset]) -> Dataset:
        return Dataset(
            np.concatenate([p.x0 for p in parts], axis=0),
            np.concatenate([p.labels for p in parts], axis=0),
        )


@dataclass
class ClassSplit:
    """Illegal and legal halves of a dataset."""

    illegal: Dataset
    legal: Dataset
    illegal_classes: tuple[int, ...]
    legal_classes: tuple[int, ...]

    def __post_init__(self) -> None:
        overlap = set(self.illegal_classes) & set(self.legal_classes)
        if overlap:
            raise ConfigError(f"Illegal and legal classes overlap: {sorted(overlap)}")
        if not set(self.illegal.classes) <= set(self.illegal_classes):
            raise ConfigError("Illegal side contains samples outside the illegal classes")
        if not set(self.legal.classes) <= set(self.legal_classes):
            raise ConfigError("Legal side contains samples outside the legal classes")

    @classmethod
    def from_dataset(
        cls, data: Dataset, illegal_classes: list[int], legal_classes: list[int]
    ) -> ClassSplit:
        return cls(
            illegal=data.select(illegal_classes),
            legal=data.select(legal_classes),
            illegal_classes=tuple(illegal_classes),
            legal_classes=tuple(legal_classes),
        )

    @property
    def counts(self) -> tuple[int, int]:
        return (len(self.illegal), len(self.legal))


@dataclass
class Batch:
    """One diffusion training batch; ``t`` is 1-based."""

    x0: NDArray[np.float64]
    labels: NDArray[np.int64]
    t: NDArray[np.int64]
    eps: NDArray[np.float64]

    def __post_init__(self) -> None:
        n = self.x0.shape[0]
        if self.labels.shape != (n,) or self.t.shape != (n,) or self.eps.shape != self.x0.shape:
            raise DimensionError(
                f"Batch shapes inconsistent: x0 {self.x0.shape}, labels {self.labels.shape}, "
                f"t {self.t.shape}, eps {self.eps.shape}"
            )

    def __len__(self) -> int:
        return int(self.x0.shape[0])


# =============================================================== model


@dataclass(frozen=True)
class DenoiserSpec:
    """Architecture of the toy denoiser."""

    data_dim: int = 2
    hidden_dim: int = 64
    num_blocks: int = 8
    num_classes: int = 4
    embed_dim: int = 16

    def __post_init__(self) -> None:
        for name in ("data_dim", "hidden_dim", "num_blocks", "num_classes", "embed_dim"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"DenoiserSpec.{name} must be a positive integer, got {value}")
        if self.embed_dim % 2:
            raise ConfigError(f"DenoiserSpec.embed_dim must be even, got {self.embed_dim}")

    @property
    def tensor_count(self) -> int:
        # class table, input projections (3 x weight, bias), blocks, head (2)
        return 1 + 6 + 4 * self.num_blocks + 2


# ================================================================ mask


@dataclass
class MaskParams:
    """Per-tensor logits of the continuous freezing mask."""

    w: NDArray[np.float64]
    temperature: float = 0.2
    target_ratio: float = 0.3
    sparsity_weight: float = 1.0

    def __post_init__(self) -> None:
        self.w = np.array(self.w, dtype=np.float64)
        if self.w.ndim != 1 or self.w.size == 0:
            raise DimensionError(f"Mask logits must be a non-empty vector, got {self.w.shape}")
        if not self.temperature > 0:
            raise ConfigError(f"Mask temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.target_ratio <= 1.0:
            raise ConfigError(f"Target ratio must lie in [0, 1], got {self.target_ratio}")
        if self.sparsity_weight < 0:
            raise ConfigError(f"Sparsity weight must be >= 0, got {self.sparsity_weight}")

    def __len__(self) -> int:
        return int(self.w.size)

    def copy(self) -> MaskParams:
        return MaskParams(self.w.copy(), self.temperature, self.target_ratio, self.sparsity_weight)


@dataclass(frozen=True)
class BinaryMask:
    """Rounded mask: bit 1 freezes the tensor."""

    bits: tuple[int, ...]

    def __post_init__(self) -> None:
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError(f"Mask bits must be 0 or 1: {self.bits}")

    def __len__(self) -> int:
        return len(self.bits)

    @property
    def achieved_ratio(self) -> float:
        return sum(self.bits) / len(self.bits) if self.bits else 0.0

    @property
    def frozen(self) -> list[bool]:
        return [b == 1 for b in self.bits]

    def as_array(self) -> NDArray[np.float64]:
        return np.asarray(self.bits, dtype=np.float64)

    @classmethod
    def zeros(cls, n: int) -> BinaryMask:
        return cls((0,) * n)

    @classmethod
    def ones(cls, n: int) -> BinaryMask:
        return cls((1,) * n)

    def __str__(self) -> str:
        frozen = sum(self.bits)
        return f"BinaryMask({frozen}/{len(self.bits)} frozen, ratio={self.achieved_ratio:.3f})"


@dataclass(frozen=True)
class RandomMaskSpec:
    """Random-ratio baseline."""

    rho: float
    seed: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")


# ============================================================ training


@dataclass(frozen=True)
class BilevelConfig:
    """Mask-learning hyperparameters."""

    outer_steps: int = 1000  # K
    inner_steps: int = 10  # L
    eta1: float = 10.0
    eta2: float = 1e-3
    rho: float = 0.3
    lambda1: LambdaValue = "auto"
    lambda2: LambdaValue = "auto"
    sparsity_weight: float = 1000.0
    temperature: float = 0.2
    batch_size: int = 16
    seed: int = 3
    log_every: int = 100

    def __post_init__(self) -> None:
        if self.outer_steps < 1 or self.inner_steps < 1:
            raise ConfigError("outer_steps and inner_steps must be >= 1")
        if self.eta1 < 0 or self.eta2 < 0:
            raise ConfigError("eta1 and eta2 must be >= 0")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")
        for name in ("lambda1", "lambda2"):
            value = getattr(self, name)
            if value != "auto" and (isinstance(value, str) or value < 0):
                raise ConfigError(f"{name} must be 'auto' or a nonnegative number, got {value!r}")
        if self.sparsity_weight < 0:
            raise ConfigError("sparsity_weight must be >= 0")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass(frozen=True)
class AttackConfig:
    """Simulated user fine-tuning."""

    lr: float = 1e-3
    steps: int = 2000
    batch_size: int = 4
    optimizer: OptimizerName = "adam"
    seed: int = 4
    log_every: int = 500

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"Unknown optimizer {self.optimizer!r}")


# ============================================================ reports


@dataclass
class EvalReport:
    """Quality and accounting for one evaluated model."""

    class_loss: dict[int, float]
    class_frechet: dict[int, float]
    illegal_classes: tuple[int, ...]
    legal_classes: tuple[int, ...]
    achieved_ratio: float
    frozen_params: int
    trainable_params: int
    total_params: int
    sec_per_step: float = 0.0
    extra: dict[str, float] = field(default_factory=dict)

    @staticmethod
    def _mean(values: dict[int, float], classes: tuple[int, ...]) -> float:
        picked = [values[c] for c in classes if c in values]
        return float(np.mean(picked)) if picked else float("nan")

    @property
    def illegal_loss(self) -> float:
        return self._mean(self.class_loss, self.illegal_classes)

    @property
    def legal_loss(self) -> float:
        return self._mean(self.class_loss, self.legal_classes)

    @property
    def illegal_frechet(self) -> float:
        return self._mean(self.class_frechet, self.illegal_classes)

    @property
    def legal_frechet(self) -> float:
        return self._mean(self.class_frechet, self.legal_classes)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["class_loss"] = {str(k): v for k, v in self.class_loss.items()}
        data["class_frechet"] = {str(k): v for k, v in self.class_frechet.items()}
        data["illegal_classes"] = list(self.illegal_classes)
        data["legal_classes"] = list(self.legal_classes)
        data.update(
            illegal_loss=self.illegal_loss,
            legal_loss=self.legal_loss,
            illegal_frechet=self.illegal_frechet,
            legal_frechet=self.legal_frechet,
        )
        return data

    def __str__(self) -> str:
        return (
            f"illegal loss {self.illegal_loss:.4f} / FD {self.illegal_frechet:.4f}, "
            f"legal loss {self.legal_loss:.4f} / FD {self.legal_frechet:.4f}, "
            f"frozen {self.frozen_params}/{self.total_params} params"
        )
