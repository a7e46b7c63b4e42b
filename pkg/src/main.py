#!/usr/bin/env python3
"""Main entry point for freeze-guard.

This module runs the mask-learning pipeline on the toy diffusion model:
1. Pre-trains the denoiser on every class
2. Fully fine-tunes it on the mask-learning data
3. Learns which tensors to freeze with the bilevel optimizer
4. Simulates a user fine-tuning the released model on illegal data
5. Evaluates the result and sweeps freezing ratios against baselines

Usage:
    # Whole pipeline into runs/demo
    pdm run fzg pretrain --run runs/demo
    pdm run fzg learn-mask --run runs/demo --rho 0.3
    pdm run fzg attack --run runs/demo
    pdm run fzg eval --run runs/demo

    # Ratio sweep with five seeds
    pdm run fzg sweep --run runs/demo --ratios 0.1,0.3,0.5

    # Finite-difference gradient checks
    pdm run fzg gradcheck
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import NoReturn

from terminaltables import AsciiTable

from src.bilevel import release, run
from src.config import (
    RunConfig,
    apply_overrides,
    build_run_config,
    load_config,
    parse_ratios,
)
from src.diffusion.data import fixed_batch
from src.evaluation import (
    Benchmark,
    SweepRow,
    evaluate,
    frozen_finetune_result,
    summarize,
    sweep,
    sweep_to_csv,
)
from src.exceptions import FreezeGuardError, GradientCheckError, NumericalError
from src.gradcheck import assert_gradients, run_gradcheck
from src.models import BinaryMask, Dataset, EvalReport
from src.optim import TrainResult, train_loop
from src.param_store import ParamSet
from src.run_directory import RunDirectory
from src.seeding import make_rng

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_INTERRUPTED = 130

# checkpoints released under mask.json; pre and ft are trained with every tensor open
MASKED_CHECKPOINTS = ("released", "attacked")


def _trace(result: TrainResult) -> list[dict]:
    return [{"step": i + 1, "loss": loss} for i, loss in enumerate(result.losses)]


class FreezeGuardPipeline:
    """Runs pipeline stages against one run directory."""

    def __init__(self, config: dict, run_dir: str | Path):
        """Initialize the pipeline.

        Args:
            config: Merged configuration dictionary
            run_dir: Directory holding the run's artifacts
        """
        self.config = config
        self.rc: RunConfig = build_run_config(config)
        self.run_dir = RunDirectory(run_dir).ensure()
        self.model = self.rc.build_model()
        self.splits = self.rc.splits()
        self.run_dir.write_config(config)

    def holdout_loss(self, params: ParamSet, data: Dataset) -> float:
        rng = make_rng(self.rc.eval.seed, "eval/holdout")
        return self.model.loss(params, fixed_batch(data, self.model.schedule.num_steps, rng))

    def pretrain(self) -> ParamSet:
        """Train the denoiser from its seeded initialization on every class."""
        cfg = self.rc.pretrain
        init = self.model.init_params(self.rc.model_seed)
        result = train_loop(
            self.model,
            init,
            self.splits.pretrain,
            lr=cfg.lr,
            steps=cfg.steps,
            batch_size=cfg.batch_size,
            optimizer=cfg.optimizer,
            seed=cfg.seed,
            stream="pretrain",
            log_every=cfg.log_every,
            label="pretrain",
        )
        holdout = self.holdout_loss(result.params, self.splits.holdout)
        final = result.losses[-1] if result.losses else None
        self.run_dir.save_params("pre", result.params)
        self.run_dir.write_metrics(
            "pretrain", _trace(result) + [{"final_loss": final, "holdout_loss": holdout}]
        )
        logger.info("Pre-training done: held-out loss %.5f", holdout)
        return result.params

    def finetune(self, theta_pre: ParamSet | None = None) -> ParamSet:
        """Fine-tune every tensor on the illegal and legal mask-learning data."""
        theta_pre = theta_pre if theta_pre is not None else self.run_dir.load_params("pre")
        self.model.check_params(theta_pre)
        split = self.rc.class_split(self.splits.mask)
        cfg = self.rc.finetune
        result = train_loop(
            self.model,
            theta_pre,
            Dataset.concat([split.illegal, split.legal]),
            lr=cfg.lr,
            steps=cfg.steps,
            batch_size=cfg.batch_size,
            optimizer=cfg.optimizer,
            seed=cfg.seed,
            log_every=cfg.log_every,
            label="full fine-tune",
        )
        self.run_dir.save_params("ft", result.params)
        self.run_dir.write_metrics("finetune", _trace(result))
        return result.params

    def learn_mask(self) -> tuple[BinaryMask, ParamSet]:
        """Fine-tune, learn the mask and write the released model."""
        theta_pre = self.run_dir.load_params("pre")
        self.model.check_params(theta_pre)
        theta_ft = self.finetune(theta_pre)
        result = run(
            self.rc.bilevel,
            self.rc.class_split(self.splits.mask),
            theta_pre,
            theta_ft,
            self.model,
        )
        released = release(theta_pre, theta_ft, result.mask)
        self.run_dir.save_mask(theta_pre.names, result.mask_params, result.mask)
        self.run_dir.save_params("released", released)
        self.run_dir.write_metrics("learn-mask", result.metrics)
        return result.mask, released

    def _released_with_mask(self) -> tuple[ParamSet, BinaryMask]:
        released = self.run_dir.load_params("released")
        self.model.check_params(released)
        mask = self.run_dir.load_mask(released).bits
        return released, mask

    def attack(self) -> ParamSet:
        """Fine-tune the released model on illegal data with the mask enforced."""
        released, mask = self._released_with_mask()
        split = self.rc.class_split(self.splits.attack)
        result = frozen_finetune_result(released, mask, split.illegal, self.rc.attack, self.model)
        self.run_dir.save_params("attacked", result.params)
        self.run_dir.write_metrics("attack", _trace(result))
        return result.params

    def evaluate(self, checkpoint: str = "attacked") -> EvalReport:
        """Evaluate a checkpoint on held-out data and write report.json."""
        params = self.run_dir.load_params(checkpoint)
        self.model.check_params(params)
        mask = None
        if checkpoint in MASKED_CHECKPOINTS:
            mask = self.run_dir.load_mask(params).bits
        holdout = self.rc.class_split(self.splits.holdout)
        report = evaluate(
            params, holdout, self.model, self.rc.eval.n_samples, self.rc.eval.seed, mask
        )
        self.run_dir.write_report({"checkpoint": checkpoint, **report.to_dict()})
        logger.info("Evaluation of %s: %s", checkpoint, report)
        return report

    def sweep(self) -> list[SweepRow]:
        """Compare the learned mask against baselines over ratios and seeds."""
        theta_pre = self.run_dir.load_params("pre")
        theta_ft = self.run_dir.load_params("ft")
        self.model.check_params(theta_pre)
        theta_pre.check_congruent(theta_ft)
        bench = Benchmark(
            model=self.model,
            splits=self.splits,
            illegal_classes=self.rc.data.illegal_classes,
            legal_classes=self.rc.data.legal_classes,
            theta_pre=theta_pre,
            theta_ft=theta_ft,
            bilevel=self.rc.bilevel,
            attack=self.rc.attack,
            n_samples=self.rc.eval.n_samples,
            eval_seed=self.rc.eval.seed,
        )
        rows = sweep(
            list(self.rc.sweep.ratios), bench, list(self.rc.sweep.seeds), self.rc.sweep.arms
        )
        self.run_dir.write_sweep(sweep_to_csv(rows))
        # wall time is left out so metrics.jsonl stays reproducible
        records = [{k: v for k, v in r.to_dict().items() if k != "sec_per_step"} for r in rows]
        self.run_dir.write_metrics("sweep", records)
        return rows


# ---------------------------------------------------------------- commands


def setup_logging(config: dict) -> None:
    """Setup logging based on configuration.

    Args:
        config: Configuration dictionary
    """
    log_config = config.get("logging", {})
    level = getattr(logging, str(log_config.get("level", "INFO")).upper())
    format_str = log_config.get("format", "%(asctime)s - %(name)s - %(levelname)s - %(message)s")

    handlers: list[logging.Handler] = [logging.StreamHandler()]

    log_file = log_config.get("file")
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(level=level, format=format_str, handlers=handlers, force=True)


def _print_table(title: str, rows: list[list]) -> None:
    table = AsciiTable(rows, title)
    print(f"\n{table.table}\n")


def _report_rows(report: EvalReport) -> list[list]:
    rows = [["class", "side", "held-out loss", "Frechet"]]
    for c in sorted(report.class_loss):
        side = "illegal" if c in report.illegal_classes else "legal"
        rows.append([c, side, f"{report.class_loss[c]:.5f}", f"{report.class_frechet[c]:.5f}"])
    rows.append(
        ["params", "", f"frozen {report.frozen_params}", f"trainable {report.trainable_params}"]
    )
    return rows


def cmd_pretrain(args: argparse.Namespace, config: dict) -> int:
    FreezeGuardPipeline(config, args.run).pretrain()
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace, config: dict) -> int:
    FreezeGuardPipeline(config, args.run).finetune()
    return EXIT_OK


def cmd_learn_mask(args: argparse.Namespace, config: dict) -> int:
    mask, _ = FreezeGuardPipeline(config, args.run).learn_mask()
    print(f"Learned mask: {mask}")
    return EXIT_OK


def cmd_attack(args: argparse.Namespace, config: dict) -> int:
    FreezeGuardPipeline(config, args.run).attack()
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, config: dict) -> int:
    report = FreezeGuardPipeline(config, args.run).evaluate(args.checkpoint)
    _print_table(f"Evaluation: {args.checkpoint}", _report_rows(report))
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, config: dict) -> int:
    rows = FreezeGuardPipeline(config, args.run).sweep()
    table = [["ratio", "arm", "seeds", "illegal FD", "legal loss", "frozen ratio", "trainable"]]
    for s in summarize(rows):
        table.append(
            [
                f"{s['ratio']:.2f}",
                s["arm"],
                s["seeds"],
                f"{s['illegal_frechet']:.4f}",
                f"{s['legal_loss']:.4f}",
                f"{s['achieved_ratio']:.3f}",
                f"{s['trainable_params']:.0f}",
            ]
        )
    _print_table("Sweep summary (seed means)", table)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, config: dict) -> int:
    results = run_gradcheck(seed=args.gradcheck_seed)
    table = [["suite", "max rel. error", "worst", "status"]]
    for r in results:
        table.append(
            [r.name, f"{r.max_rel_error:.3e}", r.worst, "ok" if r.passed else "FAILED"]
        )
    _print_table("Gradient check", table)
    assert_gradients(results)
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "learn-mask": cmd_learn_mask,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


class FzgArgumentParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with the validation code."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _common_options(with_defaults: bool) -> argparse.ArgumentParser:
    """Options accepted both before and after the command.

    Copies attached to the subcommands suppress their defaults so a value given before the
    command is not reset by the subcommand's parse.
    """

    def default(value):
        return value if with_defaults else argparse.SUPPRESS

    common = FzgArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        "-c",
        type=str,
        default=default(None),
        help="Path to a YAML or JSON config file (default: built-in defaults)",
    )
    common.add_argument(
        "--run",
        "-r",
        type=str,
        default=default("runs/default"),
        help="Run directory for artifacts (default: runs/default)",
    )
    common.add_argument(
        "--rho",
        type=float,
        default=default(None),
        help="Target freezing ratio (overrides bilevel.rho)",
    )
    common.add_argument(
        "--seed",
        type=int,
        default=default(None),
        help="Base seed; every stage seed is derived from it",
    )
    common.add_argument(
        "--ratios",
        type=parse_ratios,
        default=default(None),
        help="Comma-separated sweep ratios, e.g. 0.1,0.3,0.5",
    )
    common.add_argument(
        "--debug",
        "-d",
        action="store_true",
        default=default(False),
        help="Enable debug logging",
    )
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = FzgArgumentParser(
        prog="fzg",
        description="Learn which tensors to freeze so a released diffusion model resists "
        "fine-tuning on illegal classes",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        parents=[_common_options(with_defaults=True)],
    )
    common = _common_options(with_defaults=False)

    subparsers = parser.add_subparsers(dest="command", help="Commands")
    subparsers.add_parser("pretrain", parents=[common], help="Pre-train the toy denoiser")
    subparsers.add_parser(
        "finetune", parents=[common], help="Fully fine-tune the pre-trained model"
    )
    subparsers.add_parser(
        "learn-mask", parents=[common], help="Fine-tune, learn the freezing mask and release"
    )
    subparsers.add_parser(
        "attack", parents=[common], help="Simulate illegal fine-tuning of the released model"
    )
    eval_parser = subparsers.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    eval_parser.add_argument(
        "--checkpoint",
        choices=["pre", "ft", "released", "attacked"],
        default="attacked",
        help="Checkpoint to evaluate (default: attacked)",
    )
    subparsers.add_parser("sweep", parents=[common], help="Compare masks across freezing ratios")
    gradcheck_parser = subparsers.add_parser(
        "gradcheck", parents=[common], help="Finite-difference gradient checks"
    )
    gradcheck_parser.add_argument(
        "--gradcheck-seed", type=int, default=0, help="Seed for the check (default: 0)"
    )
    return parser


def main(argv: list[str] | None = None) -> None:
    """Main entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        sys.exit(EXIT_VALIDATION)

    try:
        config = load_config(args.config)
        config = apply_overrides(config, rho=args.rho, seed=args.seed, ratios=args.ratios)
        if args.debug:
            config["logging"]["level"] = "DEBUG"
        setup_logging(config)

        exit_code = COMMANDS[args.command](args, config)
        sys.exit(exit_code)

    except KeyboardInterrupt:
        print("\nCancelled.")
        sys.exit(EXIT_INTERRUPTED)
    except (NumericalError, GradientCheckError) as e:
        logger.error("Numerical failure: %s", e)
        if args.debug:
            raise
        sys.exit(EXIT_NUMERICAL)
    except (FreezeGuardError, OSError) as e:
        logger.error("Fatal error: %s", e)
        if args.debug:
            raise
        sys.exit(EXIT_VALIDATION)


if __name__ == "__main__":
    main()
