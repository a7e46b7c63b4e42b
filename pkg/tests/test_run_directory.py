"""Tests for src/run_directory.py - artifact layout and metrics log."""

import json

import numpy as np
import pytest

from src.exceptions import ConfigError, DimensionError, MissingArtifactError
from src.models import BinaryMask, MaskParams
from src.param_store import ParamSet
from src.run_directory import CHECKPOINTS, RunDirectory

# ============== FIXTURES ==============


@pytest.fixture
def run_dir(tmp_path):
    """Fresh run directory."""
    return RunDirectory(tmp_path / "run").ensure()


# ============== TEST CLASSES ==============


class TestLayout:
    """Tests for artifact paths."""

    def test_paths(self, run_dir):
        """Test every artifact lives directly under the root."""
        assert run_dir.config_path.name == "config.json"
        assert run_dir.mask_path.name == "mask.json"
        assert run_dir.metrics_path.name == "metrics.jsonl"
        assert run_dir.report_path.name == "report.json"
        assert run_dir.sweep_path.name == "sweep.csv"
        assert [run_dir.checkpoint_path(c).name for c in CHECKPOINTS] == [
            "pre.fzgd",
            "ft.fzgd",
            "released.fzgd",
            "attacked.fzgd",
        ]

    def test_unknown_checkpoint(self, run_dir):
        """Test an unknown checkpoint name raises ConfigError."""
        with pytest.raises(ConfigError):
            run_dir.checkpoint_path("best")

    def test_ensure_creates_root(self, tmp_path):
        """Test ensure() creates nested directories."""
        run_dir = RunDirectory(tmp_path / "a" / "b").ensure()
        assert run_dir.root.is_dir()


class TestArtifacts:
    """Tests for checkpoint, mask and report persistence."""

    def test_params_round_trip(self, run_dir, theta_pre):
        """Test saved parameters reload bit-identically."""
        run_dir.save_params("pre", theta_pre)
        assert run_dir.load_params("pre").bit_equal(theta_pre)

    def test_missing_checkpoint_names_producer(self, run_dir):
        """Test a missing checkpoint says which command makes it."""
        with pytest.raises(MissingArtifactError, match="fzg learn-mask"):
            run_dir.load_params("released")

    def test_mask_round_trip_checks_names(self, run_dir, theta_pre):
        """Test a saved mask reloads and is checked against the model."""
        n = len(theta_pre)
        mp = MaskParams(np.linspace(-1.0, 1.0, n))
        run_dir.save_mask(theta_pre.names, mp, BinaryMask.ones(n))
        loaded = run_dir.load_mask(theta_pre)
        assert loaded.bits == BinaryMask.ones(n)
        with pytest.raises(DimensionError):
            run_dir.load_mask(ParamSet({"w": np.zeros(2)}))

    def test_missing_mask(self, run_dir):
        """Test a missing mask raises MissingArtifactError."""
        with pytest.raises(MissingArtifactError):
            run_dir.load_mask()

    def test_config_and_report_are_json(self, run_dir):
        """Test config and report are written as JSON objects."""
        run_dir.write_config({"bilevel": {"rho": 0.3}})
        run_dir.write_report({"illegal_loss": 0.5})
        assert json.loads(run_dir.config_path.read_text()) == {"bilevel": {"rho": 0.3}}
        assert json.loads(run_dir.report_path.read_text())["illegal_loss"] == 0.5

    def test_no_temp_files_left(self, run_dir, theta_pre):
        """Test atomic writes leave only the final files."""
        run_dir.save_params("pre", theta_pre)
        run_dir.write_config({})
        assert sorted(p.name for p in run_dir.root.iterdir()) == ["config.json", "pre.fzgd"]


class TestMetrics:
    """Tests for the stage-grouped metrics log."""

    def test_empty(self, run_dir):
        """Test no file means no records."""
        assert run_dir.read_metrics() == []

    def test_records_tagged_with_stage(self, run_dir):
        """Test each record carries its stage first."""
        run_dir.write_metrics("pretrain", [{"step": 1, "loss": 0.5}])
        line = run_dir.metrics_path.read_text().splitlines()[0]
        assert json.loads(line) == {"stage": "pretrain", "step": 1, "loss": 0.5}
        assert line.startswith('{"stage"')

    def test_stage_order_independent_of_write_order(self, run_dir):
        """Test records are grouped in pipeline order whatever the write order."""
        run_dir.write_metrics("attack", [{"step": 1}])
        run_dir.write_metrics("pretrain", [{"step": 1}, {"step": 2}])
        stages = [r["stage"] for r in run_dir.read_metrics()]
        assert stages == ["pretrain", "pretrain", "attack"]

    def test_rerun_replaces_stage(self, run_dir):
        """Test rewriting a stage reproduces the same file."""
        run_dir.write_metrics("pretrain", [{"step": 1}])
        run_dir.write_metrics("eval", [{"loss": 0.1}])
        first = run_dir.metrics_path.read_bytes()
        run_dir.write_metrics("pretrain", [{"step": 1}])
        assert run_dir.metrics_path.read_bytes() == first

    def test_unknown_stage(self, run_dir):
        """Test an unknown stage raises ConfigError."""
        with pytest.raises(ConfigError):
            run_dir.write_metrics("legal-adapt", [])
