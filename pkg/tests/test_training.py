import math

import numpy as np
import pytest

from tinyfqa import data, training
from tinyfqa.training import (
    GradientSet,
    TrainConfig,
    adam_step,
    batch_loss,
    init_adam_state,
    loss_and_gradients,
    plcc,
    train,
)

from conftest import draw_gradcheck_instance, make_params
from oracles import finite_diff_gradients, scalar_adam_trajectory


def check_grads_against_fd(params, patches, labels, loss, rel=1e-4, abs_tol=1e-6):
    _, grads = loss_and_gradients(params, patches, labels, loss)
    arrs = training._params_to_arrays(params)
    fd = finite_diff_gradients(arrs, patches, labels, loss, batch_loss)
    for name, fd_grad in fd.items():
        analytic = np.atleast_1d(np.asarray(getattr(grads, name), dtype=np.float64))
        fd_grad = np.atleast_1d(fd_grad)
        diff = np.abs(analytic - fd_grad)
        ok = (diff <= abs_tol) | (
            diff <= rel * np.maximum(np.abs(fd_grad), np.abs(analytic))
        )
        assert ok.all(), f"{name}: worst diff {diff.max()}"


class TestPlccLoss:
    def test_identical_vectors_near_one(self):
        x = [1.0, 2.0, 3.0, 4.0]
        assert plcc(x, x) == pytest.approx(1.0, abs=1e-7)

    def test_negated_vectors_near_minus_one(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        assert plcc(x, -x) == pytest.approx(-1.0, abs=1e-7)

    def test_frozen_textbook_example(self):
        assert plcc([1, 2, 3, 5], [2, 4, 5, 9]) == pytest.approx(
            0.9944903161976938, abs=1e-7
        )

    def test_short_input_rejected(self):
        with pytest.raises(ValueError):
            plcc([1.0], [2.0])

    def test_invariant_under_positive_affine_label_transform(self, rng):
        y = rng.normal(size=16)
        t = rng.normal(size=16)
        assert plcc(y, 2.5 * t + 7.0) == pytest.approx(plcc(y, t), abs=1e-7)

    def test_bounded(self, rng):
        for _ in range(50):
            y = rng.normal(size=8)
            t = rng.normal(size=8)
            assert -1.0 <= plcc(y, t) <= 1.0


class TestLossAndGradients:
    def test_mse_zero_at_exact_fit(self, rng):
        params = make_params(rng, 1)
        patches = [rng.random((16, 16, 3)) for _ in range(3)]
        labels = training.batch_outputs(params, patches)
        loss, grads = loss_and_gradients(params, patches, labels, "mse")
        assert loss == pytest.approx(0.0, abs=1e-20)
        assert np.all(grads.kernels == 0)
        assert grads.pool_bias == 0

    def test_mse_pool_bias_gradient_closed_form(self, rng):
        params = make_params(rng, 2)
        patches = [rng.random((24, 24, 3)) for _ in range(4)]
        labels = rng.normal(size=4)
        y = training.batch_outputs(params, patches)
        _, grads = loss_and_gradients(params, patches, labels, "mse")
        expected = 2.0 / len(y) * np.sum(y - labels)
        assert grads.pool_bias == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("loss", ["mse", "plcc"])
    @pytest.mark.parametrize("n_kernels,size", [(1, 16), (2, 32), (10, 20)])
    def test_gradients_match_finite_differences(self, rng, loss, n_kernels, size):
        params, patches, labels = draw_gradcheck_instance(rng, n_kernels, size, batch=3)
        check_grads_against_fd(params, patches, labels, loss)

    def test_full_size_batch_both_losses(self, rng):
        # N=2 params, 4 random full-size patches, both losses
        params, patches, labels = draw_gradcheck_instance(rng, 2, 235, batch=4)
        for loss in ("plcc", "mse"):
            check_grads_against_fd(params, patches, labels, loss)

    def test_non_finite_sample_reports_index(self, rng):
        params = make_params(rng, 1)
        bad = np.full((16, 16, 3), np.nan)
        good = rng.random((16, 16, 3))
        with pytest.raises(training.NumericError, match="sample 1"):
            loss_and_gradients(params, [good, bad], [0.0, 1.0], "mse")

    def test_plcc_needs_two_samples(self, rng):
        params = make_params(rng, 1)
        with pytest.raises(ValueError):
            loss_and_gradients(params, [rng.random((16, 16, 3))], [1.0], "plcc")


class TestAdamStep:
    def test_zero_gradient_keeps_params(self, rng):
        params = make_params(rng, 2)
        zeros = GradientSet(
            kernels=np.zeros_like(params.kernels, dtype=np.float64),
            conv_bias=np.zeros(2),
            pool_min_w=np.zeros(2),
            pool_max_w=np.zeros(2),
            pool_bias=0.0,
        )
        state = init_adam_state(params)
        updated, state = adam_step(params, zeros, state, 1, lr=0.01)
        assert np.array_equal(updated.kernels, params.kernels)
        assert updated.pool_bias == params.pool_bias

    def test_first_step_is_signed_lr(self, rng):
        params = make_params(rng, 1)
        grads = GradientSet(
            kernels=np.full(params.kernels.shape, 0.37),
            conv_bias=np.array([-2.0]),
            pool_min_w=np.array([0.5]),
            pool_max_w=np.array([-0.5]),
            pool_bias=4.0,
        )
        updated, _ = adam_step(params, grads, init_adam_state(params), 1, lr=0.01)
        delta = updated.kernels.astype(np.float64) - params.kernels.astype(np.float64)
        assert np.allclose(delta, -0.01, atol=1e-5)  # -lr * sign(g)
        assert updated.conv_bias[0] - params.conv_bias[0] == pytest.approx(0.01, abs=1e-5)

    def test_five_steps_match_scalar_adam_on_quadratic(self, rng):
        # drive only pool_bias with the gradient of f(x) = (x - 3)^2
        params = make_params(rng, 1)
        zeros = {
            "kernels": np.zeros_like(params.kernels, dtype=np.float64),
            "conv_bias": np.zeros(1),
            "pool_min_w": np.zeros(1),
            "pool_max_w": np.zeros(1),
        }
        state = init_adam_state(params)
        trajectory = []
        current = params
        for t in range(1, 6):
            g = 2.0 * (current.pool_bias - 3.0)
            grads = GradientSet(pool_bias=g, **zeros)
            current, state = adam_step(current, grads, state, t, lr=0.05)
            trajectory.append(current.pool_bias)
        expected = scalar_adam_trajectory(
            params.pool_bias, lambda x: 2.0 * (x - 3.0), steps=5, lr=0.05
        )
        assert np.allclose(trajectory, expected, atol=1e-12)

    def test_shape_mismatch_rejected(self, rng):
        params = make_params(rng, 2)
        bad = GradientSet(
            kernels=np.zeros((1, 3, 7, 7)),
            conv_bias=np.zeros(2),
            pool_min_w=np.zeros(2),
            pool_max_w=np.zeros(2),
            pool_bias=0.0,
        )
        with pytest.raises(ValueError, match="shape mismatch"):
            adam_step(params, bad, init_adam_state(params), 1, 0.01)


class TestTrainConfig:
    def test_learning_rate_schedule_defaults(self):
        config = TrainConfig()
        assert config.lr_at(1) == pytest.approx(0.01)
        assert config.lr_at(60) == pytest.approx(0.01)
        assert config.lr_at(61) == pytest.approx(0.001)
        assert config.lr_at(120) == pytest.approx(0.001)

    def test_plcc_needs_batch_of_two(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1)

    def test_rejects_bad_decay_factor(self):
        with pytest.raises(ValueError):
            TrainConfig(decay_factor=0.0)


def tiny_dataset(tmp_path, rng, n_tiles=6, size=240, labels=None):
    records = []
    for i in range(n_tiles):
        tile = rng.random((size, size, 3)).astype(np.float32)
        path = tmp_path / f"tile{i}.png"
        data.save_image(tile, path)
        label = labels[i] if labels is not None else float(i % 3)
        records.append(
            data.SampleRecord(id=f"t{i}", image_path=path.name, label=label)
        )
    manifest = data.DatasetManifest(
        kind=data.KIND_Z_LEVEL,
        records=tuple(records),
        source=str(tmp_path / "manifest.csv"),
    )
    return manifest


class TestTrainLoop:
    def test_identical_patches_mse_converges_to_zero_loss(self, tmp_path, rng):
        # one tile, one label: variance floor is zero
        manifest = tiny_dataset(tmp_path, rng, n_tiles=1, size=235, labels=[4.0])
        config = TrainConfig(loss="mse", epochs=120, batch_size=2, seed=3)
        result = train(config, manifest, n_kernels=1)
        assert result.log[-1].train_loss < 1e-4

    def test_constant_label_batches_skipped_for_plcc(self, tmp_path, rng):
        manifest = tiny_dataset(tmp_path, rng, n_tiles=4, labels=[2.0] * 4)
        config = TrainConfig(loss="plcc", epochs=3, batch_size=4, seed=3)
        result = train(config, manifest, n_kernels=1)
        assert all(e.skipped_batches == 1 for e in result.log)
        assert all(math.isnan(e.train_loss) for e in result.log)

    def test_bit_reproducible_given_seed(self, tmp_path, rng):
        manifest = tiny_dataset(tmp_path, rng)
        config = TrainConfig(epochs=4, batch_size=4, seed=11)
        a = train(config, manifest, n_kernels=2)
        b = train(config, manifest, n_kernels=2)
        assert np.array_equal(a.params.kernels, b.params.kernels)
        assert a.params.pool_bias == b.params.pool_bias
        assert [e.train_loss for e in a.log] == [e.train_loss for e in b.log]

    def test_empty_dataset_rejected(self):
        manifest = data.DatasetManifest(kind=data.KIND_Z_LEVEL, records=())
        with pytest.raises(ValueError, match="empty"):
            train(TrainConfig(epochs=1), manifest)

    def test_log_schema_and_checkpoint_hook(self, tmp_path, rng):
        manifest = tiny_dataset(tmp_path, rng)
        seen = []
        config = TrainConfig(epochs=4, batch_size=4, seed=5, decay_interval=2)
        result = train(
            config,
            manifest,
            n_kernels=1,
            checkpoint_hook=lambda epoch, params: seen.append(epoch),
        )
        assert seen == [2, 4]
        assert [e.epoch for e in result.log] == [1, 2, 3, 4]
        assert result.log[0].lr == pytest.approx(0.01)
        assert result.log[2].lr == pytest.approx(0.001)

    def test_mse_loss_decreases_on_fixed_batch(self, rng):
        # small-step sanity: >= 95% of seeded trials are monotone over 10 steps
        monotone = 0
        trials = 20
        for seed in range(trials):
            trial_rng = np.random.default_rng(seed)
            params = make_params(trial_rng, 1)
            patches = [trial_rng.random((20, 20, 3)) for _ in range(4)]
            labels = trial_rng.normal(size=4)
            state = init_adam_state(params)
            losses = []
            for t in range(1, 11):
                loss, grads = loss_and_gradients(params, patches, labels, "mse")
                losses.append(loss)
                params, state = adam_step(params, grads, state, t, lr=1e-3)
            if all(b < a for a, b in zip(losses, losses[1:])):
                monotone += 1
        assert monotone >= 0.95 * trials


class TestRunFolds:
    def test_single_fold_degenerates_to_one_run(self, tmp_path, rng):
        manifest = tiny_dataset(tmp_path, rng, n_tiles=10)
        config = TrainConfig(epochs=2, batch_size=4, seed=21)
        result = training.run_folds(config, manifest, n_folds=1, n_kernels=1)
        assert len(result.reports) == 1
        assert set(result.mean) == {"srcc", "plcc", "roc_auc", "pr_auc"}

    def test_fold_splits_disjoint_and_sized(self, tmp_path, rng):
        manifest = tiny_dataset(tmp_path, rng, n_tiles=10)
        train_m, val_m, test_m = data.split_dataset(manifest, seed=4)
        ids = lambda m: {r.id for r in m.records}
        assert len(train_m) == 6 and len(val_m) == 2 and len(test_m) == 2
        assert ids(train_m) | ids(val_m) | ids(test_m) == ids(manifest)
        assert not (ids(train_m) & ids(val_m))
        assert not (ids(train_m) & ids(test_m))
        assert not (ids(val_m) & ids(test_m))

    def test_folds_deterministic_across_invocations(self, tmp_path, rng):
        manifest = tiny_dataset(tmp_path, rng, n_tiles=8)
        config = TrainConfig(epochs=2, batch_size=4, seed=31)
        a = training.run_folds(config, manifest, n_folds=2, n_kernels=1)
        b = training.run_folds(config, manifest, n_folds=2, n_kernels=1)
        for ra, rb in zip(a.reports, b.reports):
            assert ra.ids == rb.ids
            assert np.array_equal(ra.predictions, rb.predictions)
        assert a.mean == b.mean
