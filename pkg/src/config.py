"""Configuration loading and validation.

The user file (YAML, or JSON, which YAML parses unchanged) is deep-merged
into DEFAULT_CONFIG. Unlike a plain merge, unknown sections and keys are
rejected so a typo never silently falls back to a default.
"""

from __future__ import annotations

import logging
from copy import deepcopy
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from src.diffusion.data import DataSplits, generate_splits
from src.diffusion.model import ToyDiffusion
from src.diffusion.schedule import make_schedule
from src.exceptions import ConfigError, MissingArtifactError
from src.models import (
    AttackConfig,
    BilevelConfig,
    ClassSpec,
    ClassSplit,
    Dataset,
    DenoiserSpec,
    MixtureComponent,
    OptimizerName,
    default_class_layout,
)

logger = logging.getLogger(__name__)

# Offsets applied to --seed so every stage draws from its own seed
SEED_OFFSETS = {
    "data": 0,
    "model": 1,
    "pretrain": 2,
    "bilevel": 3,
    "attack": 4,
    "eval": 5,
    "finetune": 6,
}

# Default configuration
DEFAULT_CONFIG: dict[str, dict[str, Any]] = {
    "data": {
        "classes": None,
        "radius": 4.0,
        "std": 0.35,
        "illegal_classes": [0, 1],
        "legal_classes": [2, 3],
        "n_pretrain": 500,
        "n_mask": 200,
        "n_attack": 200,
        "n_holdout": 500,
        "seed": 0,
    },
    "model": {
        "data_dim": 2,
        "hidden_dim": 64,
        "num_blocks": 8,
        "num_classes": 4,
        "embed_dim": 16,
        "seed": 1,
    },
    "schedule": {
        "num_steps": 100,
        "beta_start": 1e-4,
        "beta_end": 0.2,
    },
    "pretrain": {
        "lr": 1e-3,
        "steps": 4000,
        "batch_size": 64,
        "optimizer": "adam",
        "seed": 2,
        "log_every": 500,
    },
    "finetune": {
        "lr": 1e-3,
        "steps": 1000,
        "batch_size": 16,
        "optimizer": "adam",
        "seed": 6,
        "log_every": 250,
    },
    "bilevel": {
        "outer_steps": 1000,
        "inner_steps": 10,
        "eta1": 10.0,
        "eta2": 1e-3,
        "rho": 0.3,
        "lambda1": "auto",
        "lambda2": "auto",
        "sparsity_weight": 1000.0,
        "temperature": 0.2,
        "batch_size": 16,
        "seed": 3,
        "log_every": 100,
    },
    "attack": {
        "lr": 1e-3,
        "steps": 2000,
        "batch_size": 4,
        "optimizer": "adam",
        "seed": 4,
        "log_every": 500,
    },
    "eval": {
        "n_samples": 1000,
        "seed": 5,
    },
    "sweep": {
        "ratios": [0.1, 0.3, 0.5, 0.7],
        "seeds": [0, 1, 2, 3, 4],
        "arms": ["fg", "random", "full_ft"],
    },
    "logging": {
        "level": "INFO",
        "file": None,
        "format": "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    },
}


def merge_config(user_config: dict | None) -> dict:
    """Deep-merge ``user_config`` into a copy of the defaults, rejecting unknown keys."""
    config = deepcopy(DEFAULT_CONFIG)
    if not user_config:
        return config
    if not isinstance(user_config, dict):
        raise ConfigError("Config root must be a mapping of sections")
    for section, values in user_config.items():
        if section not in config:
            raise ConfigError(f"Unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"Config section {section!r} must be a mapping")
        for key, value in values.items():
            if key not in config[section]:
                raise ConfigError(f"Unknown config key {section}.{key}")
            config[section][key] = value
    return config


def load_config(config_path: str | Path | None = None) -> dict:
    """Load configuration from file or use defaults.

    Args:
        config_path: Path to a YAML or JSON config file

    Returns:
        Configuration dictionary
    """
    if config_path is None:
        return deepcopy(DEFAULT_CONFIG)
    path = Path(config_path)
    if not path.exists():
        raise MissingArtifactError(f"Config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        try:
            user_config = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: cannot parse config: {e}") from e
    logger.debug("Loaded config from %s", path)
    return merge_config(user_config)


def apply_overrides(
    config: dict,
    rho: float | None = None,
    seed: int | None = None,
    ratios: list[float] | None = None,
) -> dict:
    """Command-line overrides; returns a new dict."""
    config = deepcopy(config)
    if rho is not None:
        config["bilevel"]["rho"] = rho
    if seed is not None:
        for section, offset in SEED_OFFSETS.items():
            config[section]["seed"] = seed + offset
    if ratios is not None:
        config["sweep"]["ratios"] = list(ratios)
    return config


def parse_ratios(text: str) -> list[float]:
    """``"0.1,0.3"`` -> ``[0.1, 0.3]``."""
    try:
        ratios = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"Cannot parse ratios {text!r}") from None
    if not ratios:
        raise ConfigError("At least one ratio is required")
    return ratios


# ------------------------------------------------------------ typed config

ARM_NAMES = ("fg", "random", "full_ft")
TRAIN_TYPES = {"lr": float, "steps": int, "batch_size": int, "seed": int, "log_every": int}
BILEVEL_TYPES = {
    "outer_steps": int,
    "inner_steps": int,
    "eta1": float,
    "eta2": float,
    "rho": float,
    "sparsity_weight": float,
    "temperature": float,
    "batch_size": int,
    "seed": int,
    "log_every": int,
}


def _coerce(section: dict, types: dict) -> dict:
    """Cast numeric fields (YAML 1.1 reads 1e-3 as a string)."""
    out = dict(section)
    for key, cast in types.items():
        if key in out and out[key] is not None:
            out[key] = cast(out[key])
    for key in ("lambda1", "lambda2"):
        if key in out and out[key] != "auto":
            out[key] = float(out[key])
    return out


@dataclass(frozen=True)
class TrainConfig:
    """Plain fine-tuning stage (pre-training or the full fine-tune)."""

    lr: float
    steps: int
    batch_size: int
    optimizer: OptimizerName
    seed: int
    log_every: int = 0

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"Unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class DataConfig:
    classes: tuple[ClassSpec, ...]
    illegal_classes: tuple[int, ...]
    legal_classes: tuple[int, ...]
    n_pretrain: int
    n_mask: int
    n_attack: int
    n_holdout: int
    seed: int


@dataclass(frozen=True)
class ScheduleConfig:
    num_steps: int
    beta_start: float
    beta_end: float


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int
    seed: int

    def __post_init__(self) -> None:
        if self.n_samples < 2:
            raise ConfigError(f"eval.n_samples must be >= 2, got {self.n_samples}")


@dataclass(frozen=True)
class SweepConfig:
    ratios: tuple[float, ...]
    seeds: tuple[int, ...]
    arms: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.ratios or any(not 0.0 <= r <= 1.0 for r in self.ratios):
            raise ConfigError(f"sweep.ratios must be non-empty and within [0, 1]: {self.ratios}")
        if not self.seeds:
            raise ConfigError("sweep.seeds must not be empty")
        unknown = set(self.arms) - set(ARM_NAMES)
        if unknown or not self.arms:
            raise ConfigError(f"sweep.arms must be a non-empty subset of {ARM_NAMES}: {self.arms}")


@dataclass(frozen=True)
class RunConfig:
    """Validated, typed view of a merged config dict."""

    data: DataConfig
    model: DenoiserSpec
    model_seed: int
    schedule: ScheduleConfig
    pretrain: TrainConfig
    finetune: TrainConfig
    bilevel: BilevelConfig
    attack: AttackConfig
    eval: EvalConfig
    sweep: SweepConfig

    def build_model(self) -> ToyDiffusion:
        return ToyDiffusion.build(
            self.model, self.schedule.num_steps, self.schedule.beta_start, self.schedule.beta_end
        )

    def splits(self) -> DataSplits:
        d = self.data
        return generate_splits(
            list(d.classes), d.n_pretrain, d.n_mask, d.n_attack, d.n_holdout, d.seed
        )

    def class_split(self, data: Dataset) -> ClassSplit:
        return ClassSplit.from_dataset(
            data, list(self.data.illegal_classes), list(self.data.legal_classes)
        )


def _class_specs(section: dict, num_classes: int) -> tuple[ClassSpec, ...]:
    raw = section["classes"]
    if raw is None:
        return tuple(default_class_layout(num_classes, section["radius"], section["std"]))
    if not isinstance(raw, list):
        raise ConfigError("data.classes must be a list of class definitions or null")
    specs = []
    for k, entry in enumerate(raw):
        try:
            components = tuple(
                MixtureComponent(tuple(float(v) for v in c["mean"]), float(c["std"]))
                for c in entry["components"]
            )
            default_weights = [1.0 / len(components)] * len(components)
            weights = tuple(float(w) for w in entry.get("weights", default_weights))
        except (KeyError, TypeError) as e:
            raise ConfigError(f"data.classes[{k}] is malformed: {e}") from e
        specs.append(ClassSpec(components, weights))
    return tuple(specs)


def build_run_config(config: dict) -> RunConfig:
    """Validate a merged config dict and convert it to a RunConfig.

    Raises:
        ConfigError: On any out-of-range or inconsistent value
    """
    try:
        model_section = dict(config["model"])
        model_seed = int(model_section.pop("seed"))
        spec = DenoiserSpec(**model_section)

        d = config["data"]
        classes = _class_specs(d, spec.num_classes)
        if len(classes) != spec.num_classes:
            raise ConfigError(
                f"data defines {len(classes)} classes but model.num_classes is {spec.num_classes}"
            )
        if any(c.dim != spec.data_dim for c in classes):
            raise ConfigError(f"Every class must have dimension model.data_dim={spec.data_dim}")
        illegal = tuple(int(c) for c in d["illegal_classes"])
        legal = tuple(int(c) for c in d["legal_classes"])
        if not illegal or not legal:
            raise ConfigError("data.illegal_classes and data.legal_classes must both be non-empty")
        for c in illegal + legal:
            if not 0 <= c < spec.num_classes:
                raise ConfigError(f"Class {c} out of range for {spec.num_classes} classes")
        if set(illegal) & set(legal):
            overlap = sorted(set(illegal) & set(legal))
            raise ConfigError(f"Illegal and legal classes overlap: {overlap}")
        for key in ("n_pretrain", "n_mask", "n_attack", "n_holdout"):
            if int(d[key]) < 2:
                raise ConfigError(f"data.{key} must be >= 2, got {d[key]}")
        data = DataConfig(
            classes=classes,
            illegal_classes=illegal,
            legal_classes=legal,
            n_pretrain=int(d["n_pretrain"]),
            n_mask=int(d["n_mask"]),
            n_attack=int(d["n_attack"]),
            n_holdout=int(d["n_holdout"]),
            seed=int(d["seed"]),
        )

        s = config["schedule"]
        schedule = ScheduleConfig(
            int(s["num_steps"]), float(s["beta_start"]), float(s["beta_end"])
        )
        make_schedule(schedule.num_steps, schedule.beta_start, schedule.beta_end)
        stages = ("pretrain", "finetune", "bilevel", "attack", "eval")
        seeds = [data.seed, model_seed] + [int(config[name]["seed"]) for name in stages]
        if any(x < 0 for x in seeds):
            raise ConfigError(f"Seeds must be >= 0, got {seeds}")
        sw = config["sweep"]
        return RunConfig(
            data=data,
            model=spec,
            model_seed=model_seed,
            schedule=schedule,
            pretrain=TrainConfig(**_coerce(config["pretrain"], TRAIN_TYPES)),
            finetune=TrainConfig(**_coerce(config["finetune"], TRAIN_TYPES)),
            bilevel=BilevelConfig(**_coerce(config["bilevel"], BILEVEL_TYPES)),
            attack=AttackConfig(**_coerce(config["attack"], TRAIN_TYPES)),
            eval=EvalConfig(int(config["eval"]["n_samples"]), int(config["eval"]["seed"])),
            sweep=SweepConfig(
                tuple(float(r) for r in sw["ratios"]),
                tuple(int(x) for x in sw["seeds"]),
                tuple(sw["arms"]),
            ),
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"Invalid config value: {e}") from e
