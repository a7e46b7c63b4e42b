"""Synthetic class-conditional data.

Each class is a Gaussian mixture (see ClassSpec). Splits used by the
pipeline are drawn from separate named random streams, so mask-learning
data and the data a simulated user fine-tunes on never overlap.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from src.exceptions import ConfigError, DimensionError
from src.fileio import atomic_write_text
from src.models import Batch, ClassSpec, Dataset
from src.seeding import make_rng

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("pretrain", "mask", "attack", "holdout")


def gen_class_data(
    classes: list[ClassSpec], n_per_class: int, seed: int, stream: str = "default"
) -> Dataset:
    """Draw ``n_per_class`` samples from every class mixture.

    Args:
        classes: Class definitions; label ``k`` is ``classes[k]``
        n_per_class: Samples per class (>= 1)
        seed: Run seed
        stream: Stream name distinguishing independent draws with one seed

    Returns:
        Dataset ordered by class
    """
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    if not classes:
        raise ConfigError("At least one class is required")
    dims = {c.dim for c in classes}
    if len(dims) != 1:
        raise ConfigError(f"Classes have different dimensions: {sorted(dims)}")

    rng = make_rng(seed, f"data/{stream}")
    xs, labels = [], []
    for label, spec in enumerate(classes):
        means = np.array([c.mean for c in spec.components], dtype=np.float64)
        stds = np.array([c.std for c in spec.components], dtype=np.float64)
        which = rng.choice(len(spec.components), size=n_per_class, p=np.asarray(spec.weights))
        noise = rng.standard_normal((n_per_class, spec.dim))
        xs.append(means[which] + stds[which][:, None] * noise)
        labels.append(np.full(n_per_class, label, dtype=np.int64))
    return Dataset(np.concatenate(xs, axis=0), np.concatenate(labels))


@dataclass
class DataSplits:
    """Disjoint datasets used by the pipeline stages."""

    pretrain: Dataset
    mask: Dataset
    attack: Dataset
    holdout: Dataset


def generate_splits(
    classes: list[ClassSpec],
    n_pretrain: int,
    n_mask: int,
    n_attack: int,
    n_holdout: int,
    seed: int,
) -> DataSplits:
    """Draw every split from its own stream."""
    sizes = dict(zip(SPLIT_NAMES, (n_pretrain, n_mask, n_attack, n_holdout)))
    parts = {name: gen_class_data(classes, n, seed, stream=name) for name, n in sizes.items()}
    logger.debug("Generated splits: %s", {k: len(v) for k, v in parts.items()})
    return DataSplits(**parts)


def sample_batch(
    data: Dataset, batch_size: int, num_steps: int, rng: np.random.Generator
) -> Batch:
    """Uniform rows (with replacement), uniform steps in ``[1, num_steps]`` and fresh noise."""
    if len(data) == 0:
        raise DimensionError("Cannot sample a batch from an empty dataset")
    idx = rng.integers(0, len(data), size=batch_size)
    t = rng.integers(1, num_steps + 1, size=batch_size)
    eps = rng.standard_normal((batch_size, data.x0.shape[1]))
    return Batch(x0=data.x0[idx], labels=data.labels[idx], t=t.astype(np.int64), eps=eps)


def fixed_batch(data: Dataset, num_steps: int, rng: np.random.Generator) -> Batch:
    """Whole dataset as one batch with seeded steps and noise (for evaluation)."""
    n = len(data)
    t = rng.integers(1, num_steps + 1, size=n).astype(np.int64)
    eps = rng.standard_normal(data.x0.shape)
    return Batch(x0=data.x0.copy(), labels=data.labels.copy(), t=t, eps=eps)


# ------------------------------------------------------------------------ CSV


def samples_to_csv(x: np.ndarray, labels: np.ndarray | None = None) -> str:
    """Render samples as CSV with header ``x0_0,...,x0_{d-1}[,label]``."""
    x = np.asarray(x, dtype=np.float64)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = [f"x0_{j}" for j in range(x.shape[1])]
    if labels is not None:
        header.append("label")
    writer.writerow(header)
    for i, row in enumerate(x):
        values = [repr(float(v)) for v in row]
        if labels is not None:
            values.append(str(int(labels[i])))
        writer.writerow(values)
    return buf.getvalue()


def write_dataset_csv(data: Dataset, path: str | Path) -> Path:
    return atomic_write_text(path, samples_to_csv(data.x0, data.labels))


def write_samples_csv(x: np.ndarray, path: str | Path) -> Path:
    return atomic_write_text(path, samples_to_csv(x))


def read_dataset_csv(path: str | Path) -> Dataset:
    """Read a dataset written by write_dataset_csv."""
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][-1] != "label":
        raise ConfigError(f"{path}: expected a header ending in 'label'")
    body = rows[1:]
    x = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64)
    labels = np.array([int(r[-1]) for r in body], dtype=np.int64)
    return Dataset(x.reshape(len(body), len(rows[0]) - 1), labels)
