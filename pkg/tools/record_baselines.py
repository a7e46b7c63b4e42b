#!/usr/bin/env python3
"""Record or check the pre-training quality baselines.

This script:
1. Pre-trains the toy denoiser with the given config into a run directory
2. Measures held-out loss (next to its analytic floor) and per-class Frechet distance
3. Measures the data-vs-data Frechet floor at n=2000
4. Writes the numbers to a baselines file, or checks them against one
   (20% regression tolerance)

Usage:
    pdm run python tools/record_baselines.py --out tools/baselines.json
    pdm run python tools/record_baselines.py --check tools/baselines.json
    pdm run python tools/record_baselines.py --config config/default.yaml --run runs/oracle
"""

import argparse
import json
import logging
import sys

# Add src to path
sys.path.insert(0, ".")

from src.config import load_config
from src.diffusion.data import gen_class_data
from src.diffusion.schedule import gaussian_loss_floor
from src.evaluation import frechet_distance
from src.exceptions import FreezeGuardError
from src.fileio import atomic_write_json
from src.main import FreezeGuardPipeline, setup_logging

REGRESSION_TOLERANCE = 1.2
FLOOR_SAMPLES = 2000
FLOOR_LIMIT = 0.1


def loss_floor(classes: list, schedule, data_dim: int) -> float | None:
    """Mean analytic loss floor over classes, or None when a class is a mixture."""
    if any(len(spec.components) != 1 for spec in classes):
        return None
    floors = [gaussian_loss_floor(schedule, spec.components[0].std, data_dim) for spec in classes]
    return sum(floors) / len(floors)


def measure(config_path: str | None, run_dir: str) -> dict:
    """Pre-train and measure the quantities a baseline records."""
    config = load_config(config_path)
    setup_logging(config)
    pipe = FreezeGuardPipeline(config, run_dir)

    print("Pre-training...")
    theta = pipe.pretrain()
    holdout = pipe.splits.holdout
    holdout_loss = pipe.holdout_loss(theta, holdout)

    class_frechet = {}
    for c in holdout.classes:
        generated = pipe.model.sample(theta, c, pipe.rc.eval.n_samples, pipe.rc.eval.seed)
        class_frechet[str(c)] = frechet_distance(generated, holdout.of_class(c))

    classes = list(pipe.rc.data.classes)
    a = gen_class_data(classes, FLOOR_SAMPLES, pipe.rc.data.seed, stream="floor/a")
    b = gen_class_data(classes, FLOOR_SAMPLES, pipe.rc.data.seed, stream="floor/b")
    floor = max(frechet_distance(a.of_class(c), b.of_class(c)) for c in range(len(classes)))

    return {
        "holdout_loss": holdout_loss,
        "loss_floor": loss_floor(classes, pipe.model.schedule, pipe.model.spec.data_dim),
        "class_frechet": class_frechet,
        "self_distance_floor": floor,
    }


def check(measured: dict, baseline: dict) -> list[str]:
    """Regressions of ``measured`` against ``baseline``."""
    failures = []
    limit = baseline["holdout_loss"] * REGRESSION_TOLERANCE
    if measured["holdout_loss"] > limit:
        failures.append(f"held-out loss {measured['holdout_loss']:.5f} > {limit:.5f}")
    for c, base in baseline["class_frechet"].items():
        got = measured["class_frechet"].get(c)
        if got is None:
            failures.append(f"class {c} missing from measurement")
        elif got > base * REGRESSION_TOLERANCE:
            failures.append(f"class {c} Frechet {got:.5f} > {base * REGRESSION_TOLERANCE:.5f}")
    if measured["self_distance_floor"] >= FLOOR_LIMIT:
        failures.append(f"self-distance floor {measured['self_distance_floor']:.5f}")
    return failures


def print_measurement(measured: dict) -> None:
    print(f"\n{'=' * 60}")
    print(f"Held-out loss:        {measured['holdout_loss']:.5f}")
    if measured.get("loss_floor") is not None:
        print(f"Analytic loss floor:  {measured['loss_floor']:.5f}")
    for c, fd in sorted(measured["class_frechet"].items()):
        print(f"Class {c} Frechet:      {fd:.5f}")
    print(f"Self-distance floor:  {measured['self_distance_floor']:.5f}")
    print(f"{'=' * 60}\n")


def main() -> None:
    parser = argparse.ArgumentParser(description="Record or check pre-training baselines")
    parser.add_argument("--config", "-c", help="Config file (default: built-in defaults)")
    parser.add_argument("--run", "-r", default="runs/oracle", help="Run directory")
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--out", help="Write the measured baselines here")
    group.add_argument("--check", help="Compare against a recorded baselines file")
    args = parser.parse_args()

    try:
        measured = measure(args.config, args.run)
    except FreezeGuardError as e:
        print(f"Error: {e}")
        sys.exit(1)
    except KeyboardInterrupt:
        print("\nCancelled.")
        sys.exit(130)

    print_measurement(measured)

    if args.out:
        atomic_write_json(args.out, measured)
        print(f"Baselines written to {args.out}")
        return

    with open(args.check, encoding="utf-8") as f:
        baseline = json.load(f)
    failures = check(measured, baseline)
    if failures:
        print("FAILED:")
        for failure in failures:
            print(f"  - {failure}")
        sys.exit(1)
    print("All baselines met.")


if __name__ == "__main__":
    logging.getLogger().setLevel(logging.INFO)
    main()
