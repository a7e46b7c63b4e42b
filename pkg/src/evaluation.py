"""Mitigation measurements.

A simulated user fine-tunes a released model with the freezing mask
enforced; the harness reports held-out diffusion loss and a raw-space
Fréchet distance per class, and compares the learned mask against the
Random-rho and full fine-tuning baselines across freezing ratios.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from src.bilevel import release, run
from src.diffusion.data import DataSplits, fixed_batch
from src.diffusion.model import ToyDiffusion
from src.exceptions import ConfigError, DimensionError
from src.fileio import atomic_write_text
from src.models import (
    AttackConfig,
    BilevelConfig,
    BinaryMask,
    ClassSplit,
    Dataset,
    EvalReport,
    RandomMaskSpec,
)
from src.optim import TrainResult, train_loop
from src.param_store import ParamSet
from src.seeding import make_rng

logger = logging.getLogger(__name__)

ARMS = ("fg", "random", "full_ft")
SWEEP_COLUMNS = (
    "ratio",
    "arm",
    "seed",
    "illegal_loss",
    "legal_loss",
    "illegal_frechet",
    "legal_frechet",
    "achieved_ratio",
    "frozen_params",
    "trainable_params",
    "sec_per_step",
)
THREADS_ENV = "FZG_THREADS"
FRECHET_RTOL = 1e-12


# ----------------------------------------------------------------- attack


def frozen_finetune_result(
    theta_released: ParamSet,
    mask: BinaryMask,
    dataset: Dataset,
    cfg: AttackConfig,
    model: ToyDiffusion,
    label: str = "attack",
) -> TrainResult:
    """Fine-tune with every bit-1 tensor frozen; keeps the loss trace."""
    if len(mask) != len(theta_released):
        raise DimensionError(
            f"Mask has {len(mask)} bits but the model has {len(theta_released)} tensors"
        )
    return train_loop(
        model,
        theta_released,
        dataset,
        lr=cfg.lr,
        steps=cfg.steps,
        batch_size=cfg.batch_size,
        optimizer=cfg.optimizer,
        seed=cfg.seed,
        frozen=mask.frozen,
        log_every=cfg.log_every,
        label=label,
    )


def frozen_finetune(
    theta_released: ParamSet,
    mask: BinaryMask,
    dataset: Dataset,
    cfg: AttackConfig,
    model: ToyDiffusion,
) -> ParamSet:
    """Simulated user fine-tuning of a released model.

    Tensors with bit 1 are returned bit-identical to ``theta_released``.
    """
    return frozen_finetune_result(theta_released, mask, dataset, cfg, model).params


def random_mask(spec: RandomMaskSpec, n: int) -> BinaryMask:
    """Freeze exactly ``round(rho * n)`` tensors chosen without replacement."""
    if n < 1:
        raise ConfigError(f"Tensor count must be >= 1, got {n}")
    count = int(math.floor(spec.rho * n + 0.5))
    if count == 0 and spec.rho > 0:
        logger.warning("Random mask with rho=%.3f over %d tensors freezes nothing", spec.rho, n)
    rng = make_rng(spec.seed, "mask/random")
    chosen = rng.choice(n, size=count, replace=False)
    bits = np.zeros(n, dtype=np.int64)
    bits[chosen] = 1
    return BinaryMask(tuple(int(b) for b in bits))


# ---------------------------------------------------------------- metrics


def _psd_sqrt(a: NDArray[np.float64]) -> NDArray[np.float64]:
    vals, vecs = np.linalg.eigh((a + a.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(samples_a: NDArray[np.float64], samples_b: NDArray[np.float64]) -> float:
    """Fréchet distance between Gaussians fitted to two sample sets.

    ``d^2 = |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``. The trace
    of the product root is taken through the symmetric form
    ``S_a^(1/2) S_b S_a^(1/2)``, with negative eigenvalues clamped to 0.

    For matching moments the trace terms cancel only up to round-off, so a
    squared distance at or below ``FRECHET_RTOL * (Tr S_a + Tr S_b)`` is
    reported as exactly 0. Real distances below that relative floor (about
    ``1e-6 * sqrt(Tr S_a + Tr S_b)``) are reported as 0 too.

    Args:
        samples_a: ``[n_a, d]`` samples (n_a >= 2)
        samples_b: ``[n_b, d]`` samples (n_b >= 2)

    Returns:
        Nonnegative distance ``d``
    """
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"Sample dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise DimensionError(
            f"Need at least 2 samples per side, got {a.shape[0]} and {b.shape[0]}"
        )

    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False, ddof=1))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False, ddof=1))

    root_a = _psd_sqrt(cov_a)
    middle = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh((middle + middle.T) / 2.0)
    tr_covmean = float(np.sum(np.sqrt(np.clip(vals, 0.0, None))))

    diff = mu_a - mu_b
    trace_sum = float(np.trace(cov_a) + np.trace(cov_b))
    d2 = float(diff @ diff) + trace_sum - 2.0 * tr_covmean
    if d2 <= FRECHET_RTOL * trace_sum:
        return 0.0
    return math.sqrt(d2)


def parameter_accounting(params: ParamSet, mask: BinaryMask | None) -> tuple[int, int, int]:
    """``(frozen, trainable, total)`` element counts."""
    counts = params.param_counts()
    if mask is None:
        return 0, counts.total, counts.total
    if len(mask) != len(params):
        raise DimensionError(f"Mask has {len(mask)} bits but the model has {len(params)} tensors")
    frozen = sum(c for c, b in zip(counts.counts, mask.bits) if b)
    return frozen, counts.total - frozen, counts.total


def evaluate(
    theta: ParamSet,
    holdout: ClassSplit,
    model: ToyDiffusion,
    n_samples: int,
    seed: int,
    mask: BinaryMask | None = None,
    sec_per_step: float = 0.0,
) -> EvalReport:
    """Per-class held-out loss and Fréchet distance of generated samples.

    Args:
        theta: Parameters to evaluate
        holdout: Held-out data split into illegal and legal classes
        model: Architecture and schedule
        n_samples: Generated samples per class
        seed: Evaluation seed
        mask: Freezing mask used for parameter accounting (None: nothing frozen)
        sec_per_step: Wall time per fine-tuning step, copied into the report

    Returns:
        EvalReport
    """
    model.check_params(theta)
    classes = sorted(set(holdout.illegal_classes) | set(holdout.legal_classes))
    data = Dataset.concat([holdout.illegal, holdout.legal])
    class_loss: dict[int, float] = {}
    class_frechet: dict[int, float] = {}
    for c in classes:
        subset = data.select([c])
        if len(subset) == 0:
            raise ConfigError(f"Holdout split has no samples for class {c}")
        batch = fixed_batch(subset, model.schedule.num_steps, make_rng(seed, f"eval/loss/{c}"))
        class_loss[c] = model.loss(theta, batch)
        generated = model.sample(theta, c, n_samples, seed)
        class_frechet[c] = frechet_distance(generated, subset.x0)
        logger.debug("Class %d: loss %.5f, FD %.5f", c, class_loss[c], class_frechet[c])

    frozen, trainable, total = parameter_accounting(theta, mask)
    return EvalReport(
        class_loss=class_loss,
        class_frechet=class_frechet,
        illegal_classes=tuple(holdout.illegal_classes),
        legal_classes=tuple(holdout.legal_classes),
        achieved_ratio=mask.achieved_ratio if mask is not None else 0.0,
        frozen_params=frozen,
        trainable_params=trainable,
        total_params=total,
        sec_per_step=sec_per_step,
    )


# ------------------------------------------------------------------ sweep


@dataclass
class Benchmark:
    """Everything a sweep needs: model, data, endpoints and stage settings."""

    model: ToyDiffusion
    splits: DataSplits
    illegal_classes: tuple[int, ...]
    legal_classes: tuple[int, ...]
    theta_pre: ParamSet
    theta_ft: ParamSet
    bilevel: BilevelConfig
    attack: AttackConfig
    n_samples: int = 1000
    eval_seed: int = 5

    def split(self, data: Dataset) -> ClassSplit:
        return ClassSplit.from_dataset(data, list(self.illegal_classes), list(self.legal_classes))


@dataclass
class SweepRow:
    """One CSV row: a (ratio, arm, seed) cell."""

    ratio: float
    arm: str
    seed: int
    illegal_loss: float
    legal_loss: float
    illegal_frechet: float
    legal_frechet: float
    achieved_ratio: float
    frozen_params: int
    trainable_params: int
    sec_per_step: float
    mask_bits: tuple[int, ...] = field(default=(), repr=False)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["mask_bits"] = list(self.mask_bits)
        return data


@dataclass(frozen=True)
class ArmJob:
    """One independent unit of sweep work."""

    arm: str
    ratio: float
    seed: int


def arm_mask(bench: Benchmark, job: ArmJob) -> BinaryMask:
    """Mask an arm releases with."""
    n = len(bench.theta_pre)
    if job.arm == "full_ft":
        return BinaryMask.zeros(n)
    if job.arm == "random":
        return random_mask(RandomMaskSpec(job.ratio, job.seed), n)
    if job.arm == "fg":
        cfg = replace(bench.bilevel, rho=job.ratio, seed=job.seed)
        split = bench.split(bench.splits.mask)
        result = run(cfg, split, bench.theta_pre, bench.theta_ft, bench.model)
        return result.mask
    raise ConfigError(f"Unknown sweep arm {job.arm!r}")


def run_arm(bench: Benchmark, job: ArmJob) -> SweepRow:
    """Release, attack on illegal data, adapt on legal data, evaluate both."""
    mask = arm_mask(bench, job)
    released = release(bench.theta_pre, bench.theta_ft, mask)
    attack_split = bench.split(bench.splits.attack)
    holdout = bench.split(bench.splits.holdout)
    cfg = replace(bench.attack, seed=job.seed)

    attacked = frozen_finetune_result(released, mask, attack_split.illegal, cfg, bench.model)
    adapted = frozen_finetune_result(
        released, mask, attack_split.legal, cfg, bench.model, label="legal adaptation"
    )
    illegal_report = evaluate(
        attacked.params, holdout, bench.model, bench.n_samples, bench.eval_seed, mask
    )
    legal_report = evaluate(
        adapted.params, holdout, bench.model, bench.n_samples, bench.eval_seed, mask
    )
    logger.info(
        "rho=%.2f %s seed %d: illegal FD %.4f, legal loss %.4f",
        job.ratio,
        job.arm,
        job.seed,
        illegal_report.illegal_frechet,
        legal_report.legal_loss,
    )
    return SweepRow(
        ratio=job.ratio,
        arm=job.arm,
        seed=job.seed,
        illegal_loss=illegal_report.illegal_loss,
        legal_loss=legal_report.legal_loss,
        illegal_frechet=illegal_report.illegal_frechet,
        legal_frechet=legal_report.legal_frechet,
        achieved_ratio=mask.achieved_ratio,
        frozen_params=illegal_report.frozen_params,
        trainable_params=illegal_report.trainable_params,
        sec_per_step=attacked.sec_per_step,
        mask_bits=mask.bits,
    )


def _run_job(args: tuple[Benchmark, ArmJob]) -> SweepRow:
    return run_arm(*args)


def worker_count() -> int:
    """Sweep pool size from ``FZG_THREADS`` (default 1)."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {threads}")
    return threads


def sweep(
    ratios: list[float],
    bench: Benchmark,
    seeds: list[int],
    arms: tuple[str, ...] = ARMS,
    threads: int | None = None,
) -> list[SweepRow]:
    """Compare arms over freezing ratios and seeds.

    The full fine-tuning arm does not depend on the ratio, so it is run once
    per seed and its row repeated for every ratio.

    Returns:
        Rows ordered by ratio, then arm, then seed
    """
    if not ratios:
        raise ConfigError("At least one ratio is required")
    if not seeds:
        raise ConfigError("At least one seed is required")
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ConfigError(f"Ratios must lie in [0, 1], got {r}")
    for arm in arms:
        if arm not in ARMS:
            raise ConfigError(f"Unknown sweep arm {arm!r}")

    jobs: list[ArmJob] = []
    for arm in arms:
        if arm == "full_ft":
            jobs.extend(ArmJob(arm, 0.0, s) for s in seeds)
        else:
            jobs.extend(ArmJob(arm, r, s) for r in ratios for s in seeds)

    threads = threads or worker_count()
    logger.info(
        "Sweep: %d ratios x %d arms x %d seeds on %d worker(s)",
        len(ratios),
        len(arms),
        len(seeds),
        threads,
    )
    if threads == 1:
        results = [run_arm(bench, job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_job, [(bench, job) for job in jobs]))
    done = dict(zip(jobs, results))

    rows: list[SweepRow] = []
    for r in ratios:
        for arm in arms:
            for s in seeds:
                if arm == "full_ft":
                    rows.append(replace(done[ArmJob(arm, 0.0, s)], ratio=r))
                else:
                    rows.append(done[ArmJob(arm, r, s)])
    return rows


def sweep_to_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for row in rows:
        data = row.to_dict()
        values = (data[c] for c in SWEEP_COLUMNS)
        writer.writerow([repr(v) if isinstance(v, float) else v for v in values])
    return buf.getvalue()


def write_sweep_csv(rows: list[SweepRow], path: str | Path) -> Path:
    return atomic_write_text(path, sweep_to_csv(rows))


def read_sweep_csv(path: str | Path) -> list[dict]:
    """Rows of a sweep CSV with numeric columns converted."""
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != SWEEP_COLUMNS:
            raise ConfigError(f"{path}: unexpected sweep columns {reader.fieldnames}")
        rows = []
        for raw in reader:
            row: dict = dict(raw)
            for key in ("seed", "frozen_params", "trainable_params"):
                row[key] = int(raw[key])
            for key in SWEEP_COLUMNS:
                if key not in ("arm", "seed", "frozen_params", "trainable_params"):
                    row[key] = float(raw[key])
            rows.append(row)
    return rows


def summarize(rows: list[SweepRow]) -> list[dict]:
    """Seed-averaged metrics per (ratio, arm)."""
    groups: dict[tuple[float, str], list[SweepRow]] = {}
    for row in rows:
        groups.setdefault((row.ratio, row.arm), []).append(row)
    summary = []
    for (ratio, arm), group in groups.items():
        summary.append(
            {
                "ratio": ratio,
                "arm": arm,
                "seeds": len(group),
                "illegal_frechet": float(np.mean([g.illegal_frechet for g in group])),
                "legal_loss": float(np.mean([g.legal_loss for g in group])),
                "achieved_ratio": float(np.mean([g.achieved_ratio for g in group])),
                "trainable_params": float(np.mean([g.trainable_params for g in group])),
            }
        )
    return summary
