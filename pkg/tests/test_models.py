"""Tests for src/models.py - data models."""

import math

import numpy as np
import pytest

from src.exceptions import ConfigError, DimensionError
from src.models import (
    AttackConfig,
    BilevelConfig,
    BinaryMask,
    ClassSpec,
    ClassSplit,
    Dataset,
    DenoiserSpec,
    EvalReport,
    MaskParams,
    MixtureComponent,
    RandomMaskSpec,
    default_class_layout,
)

# ============== FIXTURES ==============


@pytest.fixture
def labelled():
    """Six 2-D samples over classes 0, 1 and 2."""
    x0 = np.arange(12, dtype=np.float64).reshape(6, 2)
    return Dataset(x0, np.array([0, 1, 2, 0, 1, 2]))


@pytest.fixture
def sample_report():
    """Report with one illegal and two legal classes."""
    return EvalReport(
        class_loss={0: 0.5, 1: 0.1, 2: 0.3},
        class_frechet={0: 2.0, 1: 0.2, 2: 0.4},
        illegal_classes=(0,),
        legal_classes=(1, 2),
        achieved_ratio=0.25,
        frozen_params=30,
        trainable_params=90,
        total_params=120,
    )


# ============== TEST CLASSES ==============


class TestClassSpec:
    """Tests for ClassSpec."""

    def test_gaussian(self):
        """Test a single-component class has weight 1 and its own mean."""
        spec = ClassSpec.gaussian((1.0, -2.0), 0.5)
        assert spec.dim == 2
        assert spec.weights == (1.0,)
        np.testing.assert_array_equal(spec.mean, [1.0, -2.0])

    def test_mixture_mean(self):
        """Test the mean is weighted by the mixture weights."""
        spec = ClassSpec(
            components=(MixtureComponent((0.0, 0.0), 1.0), MixtureComponent((4.0, 8.0), 1.0)),
            weights=(0.75, 0.25),
        )
        np.testing.assert_allclose(spec.mean, [1.0, 2.0])

    @pytest.mark.parametrize(
        ("components", "weights"),
        [
            ((), ()),
            ((MixtureComponent((0.0,), 1.0),), (0.5,)),
            ((MixtureComponent((0.0,), 1.0),), (1.0, 0.0)),
            ((MixtureComponent((0.0,), 0.0),), (1.0,)),
            ((MixtureComponent((0.0,), 1.0), MixtureComponent((0.0, 0.0), 1.0)), (0.5, 0.5)),
        ],
    )
    def test_invalid(self, components, weights):
        """Test empty, unnormalized, zero-std and ragged mixtures are rejected."""
        with pytest.raises(ConfigError):
            ClassSpec(components=components, weights=weights)

    def test_to_dict(self):
        """Test to_dict lists components and weights."""
        data = ClassSpec.gaussian((3.0, 0.0), 0.2).to_dict()
        assert data == {"components": [{"mean": [3.0, 0.0], "std": 0.2}], "weights": [1.0]}

    def test_default_layout_on_circle(self):
        """Test the default classes sit evenly on a radius-4 circle."""
        layout = default_class_layout(4)
        assert len(layout) == 4
        np.testing.assert_allclose(layout[0].mean, [4.0, 0.0])
        np.testing.assert_allclose(layout[1].mean, [0.0, 4.0], atol=1e-12)
        for spec in layout:
            assert math.isclose(float(np.linalg.norm(spec.mean)), 4.0)
            assert spec.components[0].std == 0.35


class TestDataset:
    """Tests for Dataset and ClassSplit."""

    def test_shapes_checked(self):
        """Test labels must match the number of rows."""
        with pytest.raises(DimensionError):
            Dataset(np.zeros((3, 2)), np.zeros(2, dtype=np.int64))

    def test_select_keeps_order(self, labelled):
        """Test select keeps matching rows in their original order."""
        picked = labelled.select([2, 0])
        assert picked.labels.tolist() == [0, 2, 0, 2]
        assert picked.x0[:, 0].tolist() == [0.0, 4.0, 6.0, 10.0]

    def test_classes_and_of_class(self, labelled):
        """Test classes lists labels and of_class returns their rows."""
        assert labelled.classes == [0, 1, 2]
        np.testing.assert_array_equal(labelled.of_class(1), [[2.0, 3.0], [8.0, 9.0]])

    def test_concat(self, labelled):
        """Test concat stacks rows and labels."""
        both = Dataset.concat([labelled, labelled.select([1])])
        assert len(both) == 8
        assert both.labels[-2:].tolist() == [1, 1]

    def test_split_counts(self, labelled):
        """Test from_dataset partitions by class."""
        split = ClassSplit.from_dataset(labelled, [0], [1, 2])
        assert split.counts == (2, 4)
        assert split.illegal_classes == (0,)

    def test_split_overlap_rejected(self, labelled):
        """Test a class cannot be both illegal and legal."""
        with pytest.raises(ConfigError, match="overlap"):
            ClassSplit.from_dataset(labelled, [0, 1], [1, 2])

    def test_split_foreign_samples_rejected(self, labelled):
        """Test a side holding samples of another class is rejected."""
        with pytest.raises(ConfigError):
            ClassSplit(labelled, labelled.select([1]), (0,), (1,))


class TestDenoiserSpec:
    """Tests for DenoiserSpec."""

    def test_tensor_count(self):
        """Test the default spec has 41 tensors."""
        assert DenoiserSpec().tensor_count == 41
        assert DenoiserSpec(num_blocks=2).tensor_count == 17

    @pytest.mark.parametrize(
        "kwargs", [{"hidden_dim": 0}, {"num_blocks": -1}, {"embed_dim": 7}, {"data_dim": 1.5}]
    )
    def test_invalid(self, kwargs):
        """Test non-positive, non-integer or odd embedding sizes are rejected."""
        with pytest.raises(ConfigError):
            DenoiserSpec(**kwargs)


class TestMasks:
    """Tests for MaskParams, BinaryMask and RandomMaskSpec."""

    def test_mask_params_defaults(self):
        """Test default temperature and target ratio."""
        mp = MaskParams([0.0, 1.0])
        assert len(mp) == 2
        assert (mp.temperature, mp.target_ratio, mp.sparsity_weight) == (0.2, 0.3, 1.0)

    def test_mask_params_copy_independent(self):
        """Test copy does not share the logit buffer."""
        mp = MaskParams([0.0, 1.0])
        clone = mp.copy()
        clone.w[0] = 5.0
        assert mp.w[0] == 0.0

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"w": []},
            {"w": [[0.0]]},
            {"w": [0.0], "temperature": 0.0},
            {"w": [0.0], "target_ratio": 1.5},
            {"w": [0.0], "sparsity_weight": -1.0},
        ],
    )
    def test_mask_params_invalid(self, kwargs):
        """Test empty logits and out-of-range settings are rejected."""
        with pytest.raises((ConfigError, DimensionError)):
            MaskParams(**kwargs)

    def test_binary_mask(self):
        """Test ratio, frozen flags and array view."""
        mask = BinaryMask((1, 0, 0, 1))
        assert mask.achieved_ratio == 0.5
        assert mask.frozen == [True, False, False, True]
        np.testing.assert_array_equal(mask.as_array(), [1.0, 0.0, 0.0, 1.0])
        assert str(mask) == "BinaryMask(2/4 frozen, ratio=0.500)"

    def test_binary_mask_constructors(self):
        """Test zeros and ones."""
        assert BinaryMask.zeros(3).achieved_ratio == 0.0
        assert BinaryMask.ones(3).bits == (1, 1, 1)

    def test_binary_mask_rejects_non_bits(self):
        """Test values other than 0 and 1 are rejected."""
        with pytest.raises(ValueError):
            BinaryMask((0, 2))

    def test_random_spec_range(self):
        """Test rho outside [0, 1] is rejected."""
        with pytest.raises(ConfigError):
            RandomMaskSpec(rho=-0.1, seed=0)


class TestTrainingConfigs:
    """Tests for BilevelConfig and AttackConfig."""

    def test_bilevel_defaults(self):
        """Test K=1000, L=10 and auto lambdas."""
        cfg = BilevelConfig()
        assert (cfg.outer_steps, cfg.inner_steps) == (1000, 10)
        assert cfg.lambda1 == cfg.lambda2 == "auto"

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"outer_steps": 0},
            {"inner_steps": 0},
            {"eta1": -1.0},
            {"rho": 2.0},
            {"lambda1": "half"},
            {"lambda2": -0.5},
            {"temperature": 0.0},
            {"batch_size": 0},
        ],
    )
    def test_bilevel_invalid(self, kwargs):
        """Test invalid mask-learning settings raise ConfigError."""
        with pytest.raises(ConfigError):
            BilevelConfig(**kwargs)

    def test_attack_defaults(self):
        """Test the default attack is Adam at batch size 4."""
        cfg = AttackConfig()
        assert (cfg.steps, cfg.batch_size, cfg.optimizer) == (2000, 4, "adam")

    @pytest.mark.parametrize(
        "kwargs", [{"steps": -1}, {"lr": 0.0}, {"batch_size": 0}, {"optimizer": "rmsprop"}]
    )
    def test_attack_invalid(self, kwargs):
        """Test invalid attack settings raise ConfigError."""
        with pytest.raises(ConfigError):
            AttackConfig(**kwargs)


class TestEvalReport:
    """Tests for EvalReport."""

    def test_side_means(self, sample_report):
        """Test illegal and legal aggregates average their classes."""
        assert sample_report.illegal_loss == 0.5
        assert sample_report.legal_loss == pytest.approx(0.2)
        assert sample_report.illegal_frechet == 2.0
        assert sample_report.legal_frechet == pytest.approx(0.3)

    def test_missing_side_is_nan(self, sample_report):
        """Test a side without evaluated classes averages to NaN."""
        sample_report.legal_classes = (7,)
        assert math.isnan(sample_report.legal_loss)

    def test_to_dict(self, sample_report):
        """Test to_dict uses string class keys and includes aggregates."""
        data = sample_report.to_dict()
        assert data["class_loss"] == {"0": 0.5, "1": 0.1, "2": 0.3}
        assert data["legal_classes"] == [1, 2]
        assert data["illegal_loss"] == 0.5
        assert data["frozen_params"] == 30

    def test_str(self, sample_report):
        """Test the summary names frozen parameters."""
        assert "frozen 30/120 params" in str(sample_report)
