#!/usr/bin/env python3
"""Check that learned masks mitigate illegal fine-tuning better than random ones.

This script:
1. Pre-trains and fully fine-tunes the toy model (skipped if the run has them)
2. Sweeps freezing ratios over the learned-mask, random and full fine-tuning arms
3. Passes if, at some ratio, the learned mask's post-attack illegal Frechet
   distance is at least 1.1x the random mask's, while legal loss after legal
   fine-tuning stays within 10% of full fine-tuning

Ratios are tried in order, so the first one is preferred.

Usage:
    pdm run python tools/check_mitigation.py
    pdm run python tools/check_mitigation.py --run runs/mitigation --ratios 0.3,0.5,0.7
    FZG_THREADS=4 pdm run python tools/check_mitigation.py --config config/default.yaml
"""

import argparse
import logging
import sys

# Add src to path
sys.path.insert(0, ".")

from terminaltables import AsciiTable

from src.config import apply_overrides, load_config, parse_ratios
from src.evaluation import summarize
from src.exceptions import FreezeGuardError
from src.main import FreezeGuardPipeline, setup_logging

ILLEGAL_FD_FACTOR = 1.1
LEGAL_LOSS_TOLERANCE = 0.10


def verdicts(summary: list[dict]) -> list[dict]:
    """Per-ratio comparison of the learned mask against both baselines."""
    by_key = {(s["ratio"], s["arm"]): s for s in summary}
    results = []
    for ratio in sorted({s["ratio"] for s in summary}):
        fg = by_key[(ratio, "fg")]
        rnd = by_key[(ratio, "random")]
        full = by_key[(ratio, "full_ft")]
        fd_ratio = fg["illegal_frechet"] / rnd["illegal_frechet"]
        legal_gap = abs(fg["legal_loss"] - full["legal_loss"]) / full["legal_loss"]
        results.append(
            {
                "ratio": ratio,
                "fd_ratio": fd_ratio,
                "legal_gap": legal_gap,
                "mitigates": fd_ratio >= ILLEGAL_FD_FACTOR,
                "preserves": legal_gap <= LEGAL_LOSS_TOLERANCE,
            }
        )
    return results


def run_check(config_path: str | None, run_dir: str, ratios: list[float]) -> list[dict]:
    config = apply_overrides(load_config(config_path), ratios=ratios)
    config["sweep"]["arms"] = ["fg", "random", "full_ft"]
    setup_logging(config)
    pipe = FreezeGuardPipeline(config, run_dir)

    if not pipe.run_dir.checkpoint_path("pre").exists():
        print("Pre-training...")
        pipe.pretrain()
    if not pipe.run_dir.checkpoint_path("ft").exists():
        print("Fine-tuning...")
        pipe.finetune()

    print(f"Sweeping ratios {ratios} over seeds {list(pipe.rc.sweep.seeds)}...")
    return verdicts(summarize(pipe.sweep()))


def main() -> None:
    parser = argparse.ArgumentParser(description="Check the mitigation property")
    parser.add_argument("--config", "-c", help="Config file (default: built-in defaults)")
    parser.add_argument("--run", "-r", default="runs/mitigation", help="Run directory")
    parser.add_argument(
        "--ratios",
        type=parse_ratios,
        default=[0.3, 0.5, 0.7],
        help="Comma-separated ratios to try (default: 0.3,0.5,0.7)",
    )
    args = parser.parse_args()

    try:
        results = run_check(args.config, args.run, args.ratios)
    except FreezeGuardError as e:
        print(f"Error: {e}")
        sys.exit(1)
    except KeyboardInterrupt:
        print("\nCancelled.")
        sys.exit(130)

    rows = [["ratio", "FD fg/random", "legal gap", "mitigates", "preserves"]]
    for r in results:
        rows.append(
            [
                f"{r['ratio']:.2f}",
                f"{r['fd_ratio']:.3f}",
                f"{r['legal_gap']:.1%}",
                "yes" if r["mitigates"] else "no",
                "yes" if r["preserves"] else "no",
            ]
        )
    print(f"\n{AsciiTable(rows, 'Mitigation check').table}\n")

    passing = [r for r in results if r["mitigates"] and r["preserves"]]
    if not passing:
        print("FAILED: no ratio both mitigates and preserves legal fine-tuning")
        sys.exit(1)
    print(f"PASSED at ratio {passing[0]['ratio']:.2f}")


if __name__ == "__main__":
    logging.getLogger().setLevel(logging.INFO)
    main()
