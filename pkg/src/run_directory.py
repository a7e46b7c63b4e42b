"""Run directory: every artifact a pipeline stage reads or writes.

Layout::

    <run>/config.json      merged config the stages ran with
    <run>/pre.fzgd         pre-trained parameters
    <run>/ft.fzgd          fully fine-tuned parameters
    <run>/released.fzgd    blend of pre and ft under the learned mask
    <run>/attacked.fzgd    released model after simulated fine-tuning
    <run>/mask.json        logits and rounded bits
    <run>/metrics.jsonl    per-step records, grouped by stage
    <run>/report.json      evaluation report
    <run>/sweep.csv        sweep comparison table

All writes go through a temp file and rename.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

from src.exceptions import ConfigError, MissingArtifactError
from src.fileio import atomic_write_json, atomic_write_text, dumps_json
from src.freeze_mask import MaskFile, load_mask, save_mask
from src.models import BinaryMask, MaskParams
from src.param_store import ParamSet, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

CHECKPOINTS = ("pre", "ft", "released", "attacked")
STAGES = ("pretrain", "finetune", "learn-mask", "attack", "eval", "sweep")


class RunDirectory:
    """File layout of one pipeline run."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def __repr__(self) -> str:
        return f"RunDirectory({str(self.root)!r})"

    @property
    def config_path(self) -> Path:
        return self.root / "config.json"

    @property
    def mask_path(self) -> Path:
        return self.root / "mask.json"

    @property
    def metrics_path(self) -> Path:
        return self.root / "metrics.jsonl"

    @property
    def report_path(self) -> Path:
        return self.root / "report.json"

    @property
    def sweep_path(self) -> Path:
        return self.root / "sweep.csv"

    def checkpoint_path(self, name: str) -> Path:
        if name not in CHECKPOINTS:
            raise ConfigError(f"Unknown checkpoint {name!r}, expected one of {CHECKPOINTS}")
        return self.root / f"{name}.fzgd"

    def ensure(self) -> RunDirectory:
        self.root.mkdir(parents=True, exist_ok=True)
        return self

    def _require(self, path: Path, produced_by: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(f"{path} not found; run `fzg {produced_by}` first")
        return path

    # ------------------------------------------------------------- artifacts

    def write_config(self, config: dict) -> Path:
        return atomic_write_json(self.config_path, config)

    def save_params(self, name: str, params: ParamSet) -> Path:
        path = save_checkpoint(params, self.checkpoint_path(name))
        logger.info("Wrote %s", path)
        return path

    def load_params(self, name: str) -> ParamSet:
        producer = {
            "pre": "pretrain",
            "ft": "finetune",
            "released": "learn-mask",
            "attacked": "attack",
        }[name]
        return load_checkpoint(self._require(self.checkpoint_path(name), producer))

    def save_mask(self, tensor_names: list[str], mp: MaskParams | None, bits: BinaryMask) -> Path:
        path = save_mask(self.mask_path, tensor_names, mp, bits)
        logger.info("Wrote %s", path)
        return path

    def load_mask(self, params: ParamSet | None = None) -> MaskFile:
        """Load mask.json, checking it indexes ``params`` if given."""
        mask = load_mask(self._require(self.mask_path, "learn-mask"))
        if params is not None:
            mask.check_names(params)
        return mask

    def write_report(self, report: dict) -> Path:
        return atomic_write_json(self.report_path, report)

    def write_sweep(self, csv_text: str) -> Path:
        return atomic_write_text(self.sweep_path, csv_text)

    # --------------------------------------------------------------- metrics

    def read_metrics(self) -> list[dict]:
        if not self.metrics_path.exists():
            return []
        with open(self.metrics_path, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]

    def write_metrics(self, stage: str, records: list[dict]) -> Path:
        """Replace ``stage``'s records in metrics.jsonl.

        Records are kept grouped in pipeline order, so rerunning any stage
        reproduces the same file.
        """
        if stage not in STAGES:
            raise ConfigError(f"Unknown stage {stage!r}")
        existing = [r for r in self.read_metrics() if r.get("stage") != stage]
        tagged = [{"stage": stage, **r} for r in records]
        merged = sorted(existing + tagged, key=lambda r: STAGES.index(r["stage"]))
        text = "".join(dumps_json(r, indent=None) for r in merged)
        return atomic_write_text(self.metrics_path, text)
