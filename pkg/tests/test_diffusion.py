"""Tests for the toy diffusion model: schedule, denoiser, sampler and data."""

import numpy as np
import pytest

from src.diffusion.data import (
    fixed_batch,
    gen_class_data,
    generate_splits,
    read_dataset_csv,
    sample_batch,
    write_dataset_csv,
    write_samples_csv,
)
from src.diffusion.denoiser import (
    check_params,
    denoiser_forward,
    diffusion_loss,
    diffusion_loss_and_grad,
    noise_prediction_loss,
    tensor_layout,
)
from src.diffusion.model import ToyDiffusion
from src.diffusion.sampler import sample
from src.diffusion.schedule import (
    NoiseSchedule,
    forward_noise,
    gaussian_loss_floor,
    make_schedule,
)
from src.exceptions import ConfigError, DimensionError, IndexRangeError
from src.models import Batch, ClassSpec, DenoiserSpec, MixtureComponent
from src.optim import SGD, train_loop
from src.param_store import ParamSet
from src.seeding import make_rng

# ============== FIXTURES ==============


@pytest.fixture
def one_class_batch(tiny_data):
    """Batch of eight class-1 samples with fixed steps and noise."""
    rng = np.random.default_rng(7)
    x0 = tiny_data.of_class(1)[:8]
    return Batch(
        x0=x0,
        labels=np.full(8, 1, dtype=np.int64),
        t=rng.integers(1, 21, size=8),
        eps=rng.standard_normal((8, 2)),
    )


# ============== TEST CLASSES ==============


class TestSchedule:
    """Tests for make_schedule."""

    def test_single_step(self):
        """Test num_steps=1 gives one beta equal to beta_start."""
        s = make_schedule(1, 1e-4, 0.02)
        assert s.num_steps == 1
        assert s.beta[0] == 1e-4
        assert s.alpha_bar[0] == 1.0 - 1e-4

    def test_default_endpoints(self):
        """Test defaults span 1e-4 to 0.02 over 100 steps."""
        s = make_schedule()
        assert s.num_steps == 100
        assert s.beta[0] == pytest.approx(1e-4, abs=1e-15)
        assert s.beta[99] == pytest.approx(0.02, abs=1e-15)

    def test_alpha_bar_strictly_decreasing(self):
        """Test alpha_bar decreases and stays in (0, 1)."""
        s = make_schedule()
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert np.all((s.alpha_bar > 0) & (s.alpha_bar < 1))

    def test_recurrence(self):
        """Test alpha_bar[t] = alpha_bar[t-1] * (1 - beta[t])."""
        s = make_schedule()
        expected = s.alpha_bar[:-1] * (1.0 - s.beta[1:])
        np.testing.assert_allclose(s.alpha_bar[1:], expected, atol=1e-12)

    @pytest.mark.parametrize(
        "args",
        [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)],
    )
    def test_invalid_schedule(self, args):
        """Test bad step counts or betas raise ConfigError."""
        with pytest.raises(ConfigError):
            make_schedule(*args)

    def test_gaussian_loss_floor_values(self):
        """Test abar=0.5 gives 0.5 per dimension at unit std and 0 for a point mass."""
        s = NoiseSchedule(beta=np.array([0.5]), alpha=np.array([0.5]), alpha_bar=np.array([0.5]))
        assert gaussian_loss_floor(s, 1.0, 2) == pytest.approx(1.0)
        assert gaussian_loss_floor(s, 0.0, 2) == 0.0

    def test_gaussian_loss_floor_averages_steps(self):
        """Test the default floor is the mean of the per-step floors."""
        s = make_schedule(10, beta_end=0.2)
        per_step = [gaussian_loss_floor(s, 0.35, 2, np.array([t])) for t in range(1, 11)]
        assert gaussian_loss_floor(s, 0.35, 2) == pytest.approx(np.mean(per_step))
        assert all(b < a for a, b in zip(per_step, per_step[1:]))


class TestForwardNoise:
    """Tests for forward_noise."""

    def test_quarter_alpha_bar(self):
        """Test abar=0.25, x0=1, eps=2 gives 0.5 + 2 sqrt(0.75)."""
        s = NoiseSchedule(
            beta=np.array([0.75]), alpha=np.array([0.25]), alpha_bar=np.array([0.25])
        )
        out = forward_noise(np.array([1.0]), np.array([2.0]), 1, s)
        assert float(out[0]) == pytest.approx(2.232050808, abs=1e-9)

    def test_per_sample_steps(self):
        """Test each row uses its own step."""
        s = make_schedule(10)
        x0 = np.ones((2, 2))
        eps = np.zeros((2, 2))
        out = forward_noise(x0, eps, np.array([1, 10]), s)
        np.testing.assert_allclose(out[0], np.sqrt(s.alpha_bar[0]))
        np.testing.assert_allclose(out[1], np.sqrt(s.alpha_bar[9]))

    def test_unit_variance_preserved_exactly(self):
        """Test standardized, uncorrelated x0 and eps give Var(x_t) = 1 at every step."""
        s = make_schedule(100, beta_end=0.2)
        rng = np.random.default_rng(0)
        x0 = rng.standard_normal((1000, 1))
        x0 = (x0 - x0.mean()) / x0.std()
        eps = rng.standard_normal((1000, 1))
        eps -= eps.mean()
        eps -= float(eps[:, 0] @ x0[:, 0]) / float(x0[:, 0] @ x0[:, 0]) * x0
        eps /= eps.std()
        for t in range(1, s.num_steps + 1):
            assert forward_noise(x0, eps, t, s).var() == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("t", [1, 25, 50, 100])
    def test_unit_variance_monte_carlo(self, t):
        """Test fresh unit-variance draws keep Var(x_t) within 3 sigma of 1."""
        n = 40_000
        rng = np.random.default_rng(t)
        x0 = rng.standard_normal((n, 2))
        eps = rng.standard_normal((n, 2))
        x_t = forward_noise(x0, eps, t, make_schedule(100, beta_end=0.2))
        sigma = np.sqrt(2.0 / x_t.size)
        assert abs(x_t.var() - 1.0) < 3 * sigma

    @pytest.mark.parametrize("t", [0, 11])
    def test_step_out_of_range(self, t):
        """Test steps outside [1, T] raise IndexRangeError."""
        with pytest.raises(IndexRangeError):
            forward_noise(np.ones((1, 2)), np.zeros((1, 2)), np.array([t]), make_schedule(10))

    def test_shape_mismatch(self):
        """Test x0 and eps must agree in shape."""
        with pytest.raises(DimensionError):
            forward_noise(np.ones((2, 2)), np.zeros((2, 3)), 1, make_schedule(10))


class TestDenoiser:
    """Tests for the denoiser forward pass and layout."""

    def test_layout_matches_tensor_count(self, tiny_spec):
        """Test the layout has tensor_count entries with unique names."""
        layout = tensor_layout(tiny_spec)
        assert len(layout) == tiny_spec.tensor_count == 17
        assert len({name for name, _ in layout}) == len(layout)

    def test_input_layer_reads_raw_time_embedding(self, tiny_spec):
        """Test the sinusoidal time embedding feeds the input layer with no learned stage."""
        shapes = dict(tensor_layout(tiny_spec))
        e, h = tiny_spec.embed_dim, tiny_spec.hidden_dim
        assert shapes["input.t_proj.weight"] == (e, h)
        assert shapes["input.x_proj.weight"] == (tiny_spec.data_dim, h)
        assert shapes["input.c_proj.weight"] == (e, h)
        assert not any(name.startswith("time") for name in shapes)

    def test_init_matches_layout(self, tiny_spec, theta_pre):
        """Test seeded init passes check_params."""
        check_params(theta_pre, tiny_spec)

    def test_check_params_rejects_other_arch(self, theta_pre):
        """Test a different architecture is a DimensionError."""
        with pytest.raises(DimensionError):
            check_params(theta_pre, DenoiserSpec(hidden_dim=16, num_blocks=2, embed_dim=8))

    def test_init_deterministic(self, tiny_model):
        """Test the same seed gives bit-identical parameters."""
        assert tiny_model.init_params(3).bit_equal(tiny_model.init_params(3))
        assert not tiny_model.init_params(3).bit_equal(tiny_model.init_params(4))

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_default_spec_sgd_descends_from_init(self, class_layout, seed):
        """Test ten plain SGD steps at lr 1e-3 strictly lower the loss on a fixed batch."""
        model = ToyDiffusion.build(DenoiserSpec(), beta_end=0.2)
        data = gen_class_data(class_layout, 4, seed=seed, stream="test/descent")
        batch = fixed_batch(data, model.schedule.num_steps, make_rng(seed, "test/descent"))
        params = model.init_params(seed)
        optimizer = SGD(1e-3)
        losses = []
        for _ in range(11):
            loss, grad = model.loss_and_grad(params, batch)
            losses.append(loss)
            optimizer.step(params, grad)
        assert len(batch) == 16
        assert all(after < before for before, after in zip(losses, losses[1:]))

    def test_initial_prediction_near_zero(self, class_layout):
        """Test the seeded default model starts close to the zero predictor."""
        model = ToyDiffusion.build(DenoiserSpec(), beta_end=0.2)
        data = gen_class_data(class_layout, 64, seed=0, stream="test/init")
        batch = fixed_batch(data, model.schedule.num_steps, make_rng(0, "test/init"))
        zero_loss = noise_prediction_loss(batch.eps, np.zeros_like(batch.eps))
        assert model.loss(model.init_params(0), batch) < 1.5 * zero_loss

    def test_zero_params_zero_output(self, tiny_spec, theta_pre):
        """Test all-zero parameters predict zero noise."""
        zeros = theta_pre.zeros_like()
        x = np.random.default_rng(0).standard_normal((5, 2))
        out = denoiser_forward(zeros, x, np.arange(1, 6), np.array([0, 1, 2, 3, 0]), tiny_spec)
        np.testing.assert_array_equal(out, np.zeros((5, 2)))

    def test_forward_deterministic_and_finite(self, tiny_spec, theta_pre):
        """Test repeated calls agree bit-exactly and outputs are finite."""
        x = np.random.default_rng(1).standard_normal((6, 2)) * 4.0
        t = np.array([1, 5, 10, 15, 20, 3])
        y = np.array([0, 1, 2, 3, 1, 2])
        a = denoiser_forward(theta_pre, x, t, y, tiny_spec)
        b = denoiser_forward(theta_pre, x, t, y, tiny_spec)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (6, 2)
        assert np.all(np.isfinite(a))

    def test_class_label_changes_output(self, tiny_spec, theta_pre):
        """Test conditioning on a different class changes the prediction."""
        x = np.zeros((1, 2))
        t = np.array([10])
        a = denoiser_forward(theta_pre, x, t, np.array([0]), tiny_spec)
        b = denoiser_forward(theta_pre, x, t, np.array([2]), tiny_spec)
        assert not np.array_equal(a, b)

    @pytest.mark.parametrize("label", [-1, 4])
    def test_label_out_of_range(self, tiny_spec, theta_pre, label):
        """Test labels outside [0, C) raise IndexRangeError."""
        with pytest.raises(IndexRangeError):
            denoiser_forward(
                theta_pre, np.zeros((1, 2)), np.array([1]), np.array([label]), tiny_spec
            )

    def test_bad_input_shape(self, tiny_spec, theta_pre):
        """Test x_t with the wrong data dimension raises DimensionError."""
        with pytest.raises(DimensionError):
            denoiser_forward(theta_pre, np.zeros((1, 3)), np.array([1]), np.array([0]), tiny_spec)


class TestLoss:
    """Tests for the noise-prediction loss."""

    def test_perfect_prediction(self):
        """Test eps_hat == eps gives 0."""
        eps = np.array([[0.3, -1.2], [2.0, 0.1]])
        assert noise_prediction_loss(eps, eps.copy()) == 0.0

    def test_single_sample_value(self):
        """Test residual (3, 4) gives 25."""
        assert noise_prediction_loss(np.array([[3.0, 4.0]]), np.zeros((1, 2))) == 25.0

    def test_permutation_invariant(self):
        """Test reordering samples leaves the loss unchanged."""
        rng = np.random.default_rng(0)
        eps, hat = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
        perm = rng.permutation(6)
        assert noise_prediction_loss(eps[perm], hat[perm]) == pytest.approx(
            noise_prediction_loss(eps, hat), abs=1e-12
        )

    def test_nonnegative(self, tiny_model, theta_pre, one_class_batch):
        """Test the diffusion loss is nonnegative."""
        assert tiny_model.loss(theta_pre, one_class_batch) >= 0.0

    def test_loss_and_grad_agree(self, tiny_model, theta_pre, one_class_batch):
        """Test loss_and_grad returns the same loss as loss()."""
        loss, grad = tiny_model.loss_and_grad(theta_pre, one_class_batch)
        assert loss == pytest.approx(tiny_model.loss(theta_pre, one_class_batch), abs=1e-12)
        assert grad.is_congruent(theta_pre)


class TestGradient:
    """Tests for manual backpropagation."""

    def test_unused_class_row_has_zero_gradient(self, tiny_model, theta_pre, one_class_batch):
        """Test embedding rows of absent classes get exactly zero gradient."""
        _, grad = tiny_model.loss_and_grad(theta_pre, one_class_batch)
        table = grad["class_embed.weight"]
        for c in (0, 2, 3):
            np.testing.assert_array_equal(table[c], np.zeros_like(table[c]))
        assert np.any(table[1] != 0.0)

    def test_duplicated_batch_same_gradient(self, tiny_model, theta_pre, one_class_batch):
        """Test stacking a batch twice leaves the mean loss and gradient unchanged."""
        b = one_class_batch
        doubled = Batch(
            x0=np.concatenate([b.x0, b.x0]),
            labels=np.concatenate([b.labels, b.labels]),
            t=np.concatenate([b.t, b.t]),
            eps=np.concatenate([b.eps, b.eps]),
        )
        loss_a, grad_a = tiny_model.loss_and_grad(theta_pre, b)
        loss_b, grad_b = tiny_model.loss_and_grad(theta_pre, doubled)
        assert loss_b == pytest.approx(loss_a, rel=1e-12)
        for name in theta_pre.names:
            np.testing.assert_allclose(grad_b[name], grad_a[name], rtol=1e-10, atol=1e-14)

    def test_directional_derivative(self, tiny_model, theta_pre, one_class_batch):
        """Test the gradient predicts a small step's loss change."""
        loss, grad = tiny_model.loss_and_grad(theta_pre, one_class_batch)
        h = 1e-6
        direction = grad.map(lambda g: g / (np.linalg.norm(g) + 1.0))
        moved = ParamSet(
            (name, theta_pre[name] + h * direction[name]) for name in theta_pre.names
        )
        predicted = sum(float(np.sum(grad[n] * direction[n])) for n in theta_pre.names)
        actual = (tiny_model.loss(moved, one_class_batch) - loss) / h
        assert actual == pytest.approx(predicted, rel=1e-3)

    def test_module_functions_match_model(self, tiny_model, theta_pre, one_class_batch):
        """Test the ToyDiffusion wrapper delegates to the module functions."""
        s, spec = tiny_model.schedule, tiny_model.spec
        assert diffusion_loss(theta_pre, one_class_batch, s, spec) == tiny_model.loss(
            theta_pre, one_class_batch
        )
        loss, _ = diffusion_loss_and_grad(theta_pre, one_class_batch, s, spec)
        assert loss == pytest.approx(tiny_model.loss(theta_pre, one_class_batch), abs=1e-12)


class TestSampler:
    """Tests for ancestral sampling."""

    def test_deterministic(self, tiny_model, theta_pre):
        """Test same seed gives bit-identical samples."""
        a = tiny_model.sample(theta_pre, 1, 16, seed=5)
        b = tiny_model.sample(theta_pre, 1, 16, seed=5)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (16, 2)

    def test_seed_changes_samples(self, tiny_model, theta_pre):
        """Test different seeds give different samples."""
        a = tiny_model.sample(theta_pre, 1, 4, seed=5)
        b = tiny_model.sample(theta_pre, 1, 4, seed=6)
        assert not np.array_equal(a, b)

    def test_single_step_schedule_finite(self, tiny_spec, theta_pre):
        """Test a one-step schedule yields finite samples."""
        x = sample(theta_pre, 0, make_schedule(1), tiny_spec, 8, seed=0)
        assert np.all(np.isfinite(x))

    def test_per_sample_labels(self, tiny_spec, tiny_model, theta_pre):
        """Test a label vector is accepted and must have n entries."""
        x = sample(theta_pre, np.array([0, 1, 2]), tiny_model.schedule, tiny_spec, 3, seed=0)
        assert x.shape == (3, 2)
        with pytest.raises(DimensionError):
            sample(theta_pre, np.array([0, 1]), tiny_model.schedule, tiny_spec, 3, seed=0)

    @pytest.mark.slow
    def test_single_gaussian_mean(self):
        """Test a model pre-trained on one Gaussian class samples around its mean."""
        mean = np.array([2.0, -1.0])
        data = gen_class_data([ClassSpec.gaussian(tuple(mean), 0.5)], 1000, seed=0, stream="one")
        model = ToyDiffusion.build(
            DenoiserSpec(hidden_dim=32, num_blocks=2, num_classes=1), beta_end=0.2
        )
        trained = train_loop(model, model.init_params(0), data, 1e-3, 3000, 64, "adam", seed=0)
        samples = model.sample(trained.params, 0, 2000, seed=1)
        assert np.linalg.norm(samples.mean(axis=0) - mean) < 0.25

    def test_n_must_be_positive(self, tiny_model, theta_pre):
        """Test n=0 raises ConfigError."""
        with pytest.raises(ConfigError):
            tiny_model.sample(theta_pre, 0, 0, seed=0)


class TestData:
    """Tests for class data generation and batching."""

    def test_tiny_std_collapses_to_mean(self):
        """Test a near-zero std puts every sample at the mean."""
        spec = ClassSpec.gaussian((1.5, -2.0), 1e-12)
        data = gen_class_data([spec], 10, seed=0)
        np.testing.assert_allclose(data.x0, np.tile([1.5, -2.0], (10, 1)), atol=1e-10)

    @pytest.mark.slow
    def test_empirical_mean(self):
        """Test 1e5 draws from a mixture have mean within 0.02 of the mixture mean."""
        spec = ClassSpec(
            components=(MixtureComponent((2.0, 0.0), 0.5), MixtureComponent((-1.0, 1.0), 0.5)),
            weights=(0.25, 0.75),
        )
        data = gen_class_data([spec], 100_000, seed=0)
        np.testing.assert_allclose(data.x0.mean(axis=0), spec.mean, atol=0.02)

    def test_same_seed_identical(self, class_layout):
        """Test generation is deterministic in seed and stream."""
        a = gen_class_data(class_layout, 5, seed=3, stream="x")
        b = gen_class_data(class_layout, 5, seed=3, stream="x")
        c = gen_class_data(class_layout, 5, seed=3, stream="y")
        np.testing.assert_array_equal(a.x0, b.x0)
        assert not np.array_equal(a.x0, c.x0)

    def test_labels_ordered_by_class(self, tiny_data):
        """Test each class contributes n_per_class rows."""
        assert len(tiny_data) == 128
        assert tiny_data.classes == [0, 1, 2, 3]
        assert all(len(tiny_data.of_class(c)) == 32 for c in range(4))

    def test_splits_are_disjoint(self, class_layout):
        """Test the four splits never share a sample."""
        splits = generate_splits(class_layout, 20, 10, 10, 20, seed=0)
        rows = [
            {tuple(r) for r in part.x0}
            for part in (splits.pretrain, splits.mask, splits.attack, splits.holdout)
        ]
        for i in range(4):
            for j in range(i + 1, 4):
                assert not rows[i] & rows[j]

    def test_invalid_counts(self, class_layout):
        """Test zero samples per class or no classes raise ConfigError."""
        with pytest.raises(ConfigError):
            gen_class_data(class_layout, 0, seed=0)
        with pytest.raises(ConfigError):
            gen_class_data([], 5, seed=0)

    def test_csv_round_trip(self, tiny_data, tmp_path):
        """Test dataset CSV preserves every value and label."""
        path = write_dataset_csv(tiny_data, tmp_path / "data.csv")
        loaded = read_dataset_csv(path)
        np.testing.assert_array_equal(loaded.x0, tiny_data.x0)
        np.testing.assert_array_equal(loaded.labels, tiny_data.labels)
        assert path.read_text().splitlines()[0] == "x0_0,x0_1,label"

    def test_samples_csv_has_no_label(self, tmp_path):
        """Test generated-sample CSV has the dataset header minus the label column."""
        path = write_samples_csv(np.array([[0.5, -1.0], [2.0, 3.25]]), tmp_path / "s.csv")
        assert path.read_text().splitlines() == ["x0_0,x0_1", "0.5,-1.0", "2.0,3.25"]

    def test_sample_batch_ranges(self, tiny_data):
        """Test sampled steps lie in [1, T] and rows come from the dataset."""
        batch = sample_batch(tiny_data, 64, 20, np.random.default_rng(0))
        assert len(batch) == 64
        assert batch.t.min() >= 1 and batch.t.max() <= 20
        assert set(batch.labels.tolist()) <= {0, 1, 2, 3}

    def test_fixed_batch_covers_dataset(self, tiny_data):
        """Test fixed_batch uses every row once."""
        batch = fixed_batch(tiny_data, 20, np.random.default_rng(0))
        np.testing.assert_array_equal(batch.x0, tiny_data.x0)
        assert batch.eps.shape == tiny_data.x0.shape
