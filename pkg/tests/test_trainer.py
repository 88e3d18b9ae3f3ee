import numpy as np
import pytest

from lengthcast.errors import DomainError, UsageError
from lengthcast.models.schemas import PoolingMode, TrainConfig
from lengthcast.services import trainer
from lengthcast.services.head import BinLayout, HeadGradients, HeadParams, forward_batch
from lengthcast.services.trainer import (
    InputScaler,
    NonFiniteGradientError,
    OptimizerState,
    TrainingDivergedError,
    adamw_step,
    evaluate,
    fit_epoch,
    lambda_sweep,
    pooling_ablation,
    report_from_predictions,
    train,
)

FAST = dict(learning_rate=0.01, epochs=5, batch_size=16, seed=42, num_bins=8)


@pytest.fixture(scope="module")
def small_splits(small_synth):
    return small_synth[:120], small_synth[120:160], small_synth[160:]


def _step(params, grads, **config):
    return adamw_step(params, OptimizerState.for_params(params), grads, TrainConfig(**config))


class TestAdamW:
    def test_first_step_moves_by_learning_rate(self):
        params = HeadParams(np.ones((1, 1)), np.zeros(1))
        grads = HeadGradients(dW=np.array([[2.0]]), db=np.array([-3.0]), dh=np.zeros(1), loss=0.0)
        updated, state = _step(params, grads, learning_rate=0.1, weight_decay=0.0)
        assert updated.W[0, 0] == pytest.approx(0.9, abs=1e-8)
        assert updated.b[0] == pytest.approx(0.1, abs=1e-8)
        assert state.t == 1
        np.testing.assert_allclose(state.m_W, [[0.2]])
        np.testing.assert_allclose(state.v_W, [[0.004]])

    def test_single_parameter_first_step(self):
        params = HeadParams(np.zeros((1, 1)), np.zeros(1))
        grads = HeadGradients(dW=np.ones((1, 1)), db=np.zeros(1), dh=np.zeros(1), loss=0.0)
        updated, _ = _step(params, grads, learning_rate=0.01)
        assert updated.W[0, 0] == pytest.approx(-0.01 / (1.0 + 1e-8), abs=1e-9)

    def test_zero_learning_rate_leaves_parameters_unchanged(self):
        params = HeadParams(np.full((2, 3), 0.5), np.ones(2))
        grads = HeadGradients(dW=np.ones((2, 3)), db=np.ones(2), dh=np.zeros(3), loss=0.0)
        updated, state = _step(params, grads, learning_rate=0.0)
        np.testing.assert_array_equal(updated.W, params.W)
        np.testing.assert_array_equal(updated.b, params.b)
        assert state.t == 1

    def test_weight_decay_is_decoupled(self):
        params = HeadParams(np.full((2, 2), 4.0), np.full(2, -2.0))
        grads = HeadGradients(dW=np.zeros((2, 2)), db=np.zeros(2), dh=np.zeros(2), loss=0.0)
        updated, _ = _step(params, grads, learning_rate=0.1, weight_decay=0.5)
        np.testing.assert_allclose(updated.W, 4.0 * (1 - 0.1 * 0.5))
        np.testing.assert_allclose(updated.b, -2.0 * (1 - 0.1 * 0.5))

    def test_does_not_mutate_inputs(self):
        params = HeadParams(np.ones((1, 2)), np.zeros(1))
        state = OptimizerState.for_params(params)
        grads = HeadGradients(dW=np.ones((1, 2)), db=np.ones(1), dh=np.zeros(2), loss=0.0)
        adamw_step(params, state, grads, TrainConfig(learning_rate=0.1))
        np.testing.assert_array_equal(params.W, np.ones((1, 2)))
        assert state.t == 0

    def test_non_finite_gradient(self):
        params = HeadParams(np.ones((1, 2)), np.zeros(1))
        grads = HeadGradients(dW=np.array([[np.nan, 1.0]]), db=np.zeros(1), dh=np.zeros(2), loss=0.0)
        with pytest.raises(NonFiniteGradientError):
            _step(params, grads)

    def test_shape_mismatch(self):
        params = HeadParams(np.ones((1, 2)), np.zeros(1))
        grads = HeadGradients(dW=np.ones((2, 2)), db=np.zeros(2), dh=np.zeros(2), loss=0.0)
        with pytest.raises(DomainError):
            _step(params, grads)


class TestInputScaler:
    def test_fold_matches_transformed_forward(self, rng):
        inputs = rng.normal(3.0, 5.0, size=(20, 4))
        inputs[:, 2] = 7.0
        scaler = InputScaler.fit(inputs)
        assert scaler.scale[2] == 1.0
        params = HeadParams(rng.normal(size=(3, 4)), rng.normal(size=3))
        bins = BinLayout(edges=[0.0, 1.0, 5.0, 9.0])
        folded = forward_batch(scaler.fold(params), inputs, bins).y_hat
        direct = forward_batch(params, scaler.transform(inputs), bins).y_hat
        np.testing.assert_allclose(folded, direct, atol=1e-10)

    def test_disabled_is_identity(self, rng):
        inputs = rng.normal(size=(5, 3))
        scaler = InputScaler.fit(inputs, enabled=False)
        np.testing.assert_array_equal(scaler.transform(inputs), inputs)


class TestTrain:
    def test_deterministic(self, small_splits):
        train_set, val_set, _ = small_splits
        first = train(train_set, val_set, TrainConfig(**FAST))
        second = train(train_set, val_set, TrainConfig(**FAST))
        np.testing.assert_array_equal(first.params.W, second.params.W)
        np.testing.assert_array_equal(first.params.b, second.params.b)
        assert [h.train_loss for h in first.history] == [h.train_loss for h in second.history]

    def test_history_and_best_epoch(self, small_splits):
        train_set, val_set, _ = small_splits
        result = train(train_set, val_set, TrainConfig(**FAST))
        assert [h.epoch for h in result.history] == list(range(5))
        best = min(h.val_mae for h in result.history)
        assert result.history[result.best_epoch].val_mae == best
        assert result.history[-1].train_loss < result.history[0].train_loss

    def test_early_epoch_losses_do_not_rise(self, small_splits):
        train_set, val_set, _ = small_splits
        result = train(train_set, val_set, TrainConfig(**{**FAST, "epochs": 3}))
        losses = [h.train_loss for h in result.history]
        rises = [b / a - 1.0 for a, b in zip(losses, losses[1:]) if b > a]
        assert len(rises) <= 1 and all(rise <= 0.01 for rise in rises)

    def test_saved_head_scores_its_best_epoch(self, small_splits):
        train_set, val_set, _ = small_splits
        result = train(train_set, val_set, TrainConfig(**FAST))
        report = evaluate(result.params, result.bins, val_set, PoolingMode.EGTP)
        assert report.mae == pytest.approx(result.history[result.best_epoch].val_mae, rel=1e-9)

    def test_head_remembers_its_pooling(self, small_splits):
        train_set, val_set, _ = small_splits
        result = train(train_set, val_set, TrainConfig(**{**FAST, "pooling": "mean", "alpha": 0.5}))
        assert result.params.pooling is PoolingMode.MEAN and result.params.alpha == 0.5
        stored = evaluate(result.params, result.bins, val_set)
        explicit = evaluate(result.params, result.bins, val_set, PoolingMode.MEAN)
        assert stored.mae == explicit.mae
        assert stored.mae == pytest.approx(result.history[result.best_epoch].val_mae, rel=1e-9)

    def test_single_bin_predicts_a_constant(self, small_splits):
        train_set, val_set, _ = small_splits
        result = train(train_set, val_set, TrainConfig(**{**FAST, "num_bins": 1}))
        report = evaluate(result.params, result.bins, val_set)
        predictions = {row.y_hat for row in report.rows}
        assert len(predictions) == 1
        assert predictions.pop() == pytest.approx(result.bins.centers[0])

    def test_empty_validation_set_falls_back_to_training_mae(self, small_splits):
        train_set, _, _ = small_splits
        result = train(train_set, [], TrainConfig(**{**FAST, "epochs": 2}))
        assert len(result.history) == 2

    def test_empty_training_set(self, small_splits):
        with pytest.raises(UsageError):
            train([], small_splits[1], TrainConfig(**FAST))

    def test_diverged_loss_names_epoch_and_batch(self, small_splits, monkeypatch):
        def broken(params, inputs, lengths, bins, weights=None):
            return HeadGradients(dW=np.zeros_like(params.W), db=np.zeros_like(params.b), dh=np.zeros(0), loss=np.nan)

        monkeypatch.setattr(trainer, "batch_gradients", broken)
        with pytest.raises(TrainingDivergedError) as info:
            train(small_splits[0], small_splits[1], TrainConfig(**FAST))
        assert (info.value.epoch, info.value.batch) == (0, 0)

    def test_fit_epoch_shuffles_by_epoch(self, rng):
        inputs = rng.normal(size=(32, 2))
        lengths = rng.integers(1, 50, size=32).astype(float)
        bins = BinLayout(edges=[0.0, 25.0, 50.0])
        config = TrainConfig(learning_rate=0.05, batch_size=8)
        params = HeadParams.zeros(2, 2)
        state = OptimizerState.for_params(params)
        a = fit_epoch(params, state, inputs, lengths, bins, config, epoch=0)
        b = fit_epoch(params, state, inputs, lengths, bins, config, epoch=0)
        c = fit_epoch(params, state, inputs, lengths, bins, config, epoch=1)
        np.testing.assert_array_equal(a[0].W, b[0].W)
        assert a[1].t == 4
        assert not np.array_equal(a[0].W, c[0].W)


class TestEvaluate:
    def test_metrics(self):
        report = report_from_predictions(["a", "b"], [10, 20], [12.0, 15.0])
        assert report.mae == pytest.approx(3.5)
        assert report.rmse == pytest.approx(np.sqrt(14.5))

    def test_predictions_clamp_to_one_token(self):
        report = report_from_predictions(["a"], [3], [0.2])
        assert report.rows[0].y_hat == 1.0
        assert report.mae == pytest.approx(2.0)

    def test_constant_median_predictor(self, rng):
        truths = rng.integers(1, 400, size=31)
        median = float(np.median(truths))
        report = report_from_predictions([str(i) for i in range(31)], truths, np.full(31, median))
        assert report.mae == pytest.approx(sum(abs(int(t) - median) for t in truths) / 31, rel=1e-12)

    def test_perfect_predictions(self):
        report = report_from_predictions(["a", "b"], [4, 9], [4.0, 9.0])
        assert report.mae == report.rmse == 0.0

    def test_mae_never_exceeds_rmse(self, rng):
        for _ in range(50):
            truths = rng.integers(1, 500, size=10)
            report = report_from_predictions([str(i) for i in range(10)], truths, rng.uniform(0, 600, size=10))
            assert report.mae <= report.rmse + 1e-12

    def test_empty_dataset(self):
        with pytest.raises(UsageError):
            evaluate(HeadParams.zeros(2, 3), BinLayout(edges=[0.0, 1.0, 2.0]), [])

    def test_mismatched_lengths(self):
        with pytest.raises(DomainError):
            report_from_predictions(["a", "b"], [1, 2], [1.0])


class TestSweeps:
    def test_lambda_sweep_rows(self, small_splits):
        rows = lambda_sweep(*small_splits, TrainConfig(**{**FAST, "epochs": 2}), [0.0, 0.5, 1.0])
        assert [row["lambda"] for row in rows] == [0.0, 0.5, 1.0]
        assert all(row["test_mae"] >= 0 for row in rows)

    def test_lambda_sweep_validates_values(self, small_splits):
        with pytest.raises(ValueError):
            lambda_sweep(*small_splits, TrainConfig(**{**FAST, "epochs": 1}), [1.5])

    def test_pooling_ablation_rows(self, small_splits):
        rows = pooling_ablation(*small_splits, TrainConfig(**{**FAST, "epochs": 2}))
        assert [row["pooling"] for row in rows] == ["egtp", "mean", "max", "last"]
