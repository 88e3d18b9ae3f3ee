import numpy as np
import pytest

from conftest import make_record, make_sequence
from lengthcast.errors import DomainError, UsageError
from lengthcast.models.records import HiddenSequence
from lengthcast.models.schemas import PoolingMode, TrainConfig
from lengthcast.services.head import BinLayout, HeadParams, forward, joint_loss, soft_label
from lengthcast.services.plp import (
    PlpExample,
    aggregate,
    build_examples,
    plp_eval_curve,
    plp_sequence_loss,
    plp_train,
    remaining_target,
    step_features,
    subsample_steps,
)
from lengthcast.services.pooling import egtp_pool
from lengthcast.services.trainer import evaluate
from lengthcast.utils.numerics import SeededRng

FAST = dict(learning_rate=0.02, epochs=4, batch_size=8, seed=42, num_bins=8)


def _relative_error(analytic, numeric):
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / scale)


def _oracle(example, steps):
    return example.T - steps


@pytest.fixture
def example(rng):
    return PlpExample(id="ex", prompt_feature=rng.normal(size=3), generated=make_sequence(rng, 6, 3))


class TestAggregate:
    def test_empty_prefix_pads_with_zeros(self):
        z = aggregate(np.array([1.0, 2.0]), None)
        np.testing.assert_array_equal(z, [1.0, 2.0, 0.0, 0.0])

    def test_prefix_is_egtp_pooled(self, rng):
        prefix = make_sequence(rng, 4, 2)
        z = aggregate(np.array([1.0, 2.0]), prefix, alpha=0.5)
        np.testing.assert_allclose(z[2:], egtp_pool(prefix, 0.5).vector)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DomainError):
            aggregate(np.zeros(2), make_sequence(rng, 2, 3))

    def test_remaining_target(self):
        assert remaining_target(10, 0) == 10
        assert remaining_target(10, 9) == 1
        with pytest.raises(DomainError):
            remaining_target(10, 10)


class TestStepFeatures:
    def test_prefix_sums_match_direct_pooling(self, example):
        steps = np.arange(example.T)
        fast = step_features(example, steps, alpha=0.7)
        for row, t in enumerate(steps):
            direct = aggregate(example.prompt_feature, example.generated.prefix(int(t)), alpha=0.7)
            np.testing.assert_allclose(fast[row], direct, atol=1e-12)

    def test_prefixes_far_below_the_peak_entropy(self):
        generated = HiddenSequence([[1.0, -2.0], [3.0, 0.5], [-1.0, 4.0]], [0.0, 0.01, 7.44])
        example = PlpExample(id="cold", prompt_feature=np.zeros(2), generated=generated)
        features = step_features(example, [0, 1, 2], alpha=0.01)
        for row, t in enumerate([0, 1, 2]):
            direct = aggregate(example.prompt_feature, generated.prefix(t), alpha=0.01)
            np.testing.assert_allclose(features[row], direct, atol=1e-12)
        np.testing.assert_allclose(features[2, 2:], egtp_pool(generated.prefix(2), 0.01).vector, atol=1e-12)

    def test_rejects_steps_past_the_end(self, example):
        with pytest.raises(DomainError):
            step_features(example, [example.T])

    def test_extreme_entropies_stay_finite(self, rng):
        generated = HiddenSequence(rng.normal(size=(4, 2)), [0.0, 900.0, 0.0, 1.0])
        example = PlpExample(id="hot", prompt_feature=np.zeros(2), generated=generated)
        features = step_features(example, [0, 1, 2, 3], alpha=0.5)
        assert np.all(np.isfinite(features))
        np.testing.assert_allclose(features[1, 2:], generated.states[0], atol=1e-12)


class TestSequenceLoss:
    def test_mean_of_step_losses_and_gradients(self, example, rng):
        bins = BinLayout(edges=[0.0, 2.0, 4.0, 7.0])
        params = HeadParams(rng.normal(0.0, 0.3, size=(3, 6)), rng.normal(size=3), loss_lambda=0.7, norm_scale=7.0)

        def mean_loss(candidate):
            total = 0.0
            for t in range(example.T):
                z = aggregate(example.prompt_feature, example.generated.prefix(t))
                y = example.T - t
                total += joint_loss(soft_label(y, bins), forward(candidate, z, bins), y, candidate)
            return total / example.T

        grads = plp_sequence_loss(example, params, bins)
        assert grads.loss == pytest.approx(mean_loss(params), rel=1e-10)
        assert grads.dh.shape == (example.T, 6)
        step = 1e-6
        for index in [(0, 0), (1, 4), (2, 5)]:
            plus, minus = params.copy(), params.copy()
            plus.W[index] += step
            minus.W[index] -= step
            numeric = (mean_loss(plus) - mean_loss(minus)) / (2 * step)
            assert grads.dW[index] == pytest.approx(numeric, rel=1e-4, abs=1e-8)

    def test_gradients_match_finite_differences_over_random_sequences(self):
        rng = np.random.default_rng(42)
        step = 1e-5
        for _ in range(100):
            d = int(rng.integers(1, 4))
            T = int(rng.integers(1, 7))
            example = PlpExample(id="fd", prompt_feature=rng.normal(size=d), generated=make_sequence(rng, T, d))
            bins = BinLayout(edges=np.sort(rng.choice(np.arange(1, 12), size=int(rng.integers(2, 6)), replace=False)) - 0.5)
            params = HeadParams(
                rng.normal(0.0, 0.5, size=(bins.K, 2 * d)),
                rng.normal(0.0, 0.5, size=bins.K),
                loss_lambda=float(rng.uniform()),
                norm_scale=float(bins.edges[-1]),
            )
            grads = plp_sequence_loss(example, params, bins)
            numeric_W = np.zeros_like(params.W)
            for index in np.ndindex(*params.W.shape):
                plus, minus = params.copy(), params.copy()
                plus.W[index] += step
                minus.W[index] -= step
                numeric_W[index] = (
                    plp_sequence_loss(example, plus, bins).loss - plp_sequence_loss(example, minus, bins).loss
                ) / (2 * step)
            numeric_b = np.zeros_like(params.b)
            for k in range(params.K):
                plus, minus = params.copy(), params.copy()
                plus.b[k] += step
                minus.b[k] -= step
                numeric_b[k] = (
                    plp_sequence_loss(example, plus, bins).loss - plp_sequence_loss(example, minus, bins).loss
                ) / (2 * step)
            assert _relative_error(grads.dW, numeric_W) < 1e-4
            assert _relative_error(grads.db, numeric_b) < 1e-4

    def test_wrong_head_width(self, example):
        with pytest.raises(DomainError):
            plp_sequence_loss(example, HeadParams.zeros(2, 3), BinLayout(edges=[0.0, 3.0, 6.0]))


class TestSubsample:
    def test_short_sequences_keep_every_step(self):
        np.testing.assert_array_equal(subsample_steps(5, 8, SeededRng(0)), np.arange(5))

    def test_one_step_per_stratum(self):
        steps = subsample_steps(1000, 10, SeededRng(3))
        assert steps.size == 10
        np.testing.assert_array_equal(steps // 100, np.arange(10))


class TestPlpTrainAndCurve:
    def test_oracle_curve_is_zero(self, small_synth):
        curve = plp_eval_curve(None, None, small_synth[:20], [0.0, 0.25, 0.5, 0.75], predictor=_oracle)
        assert [point.mae for point in curve.checkpoints] == [0.0, 0.0, 0.0, 0.0]

    @pytest.mark.parametrize("fractions", [[], [0.5, 0.25], [0.0, 1.0], [-0.1]])
    def test_rejects_bad_fractions(self, small_synth, fractions):
        with pytest.raises(UsageError):
            plp_eval_curve(None, None, small_synth[:5], fractions, predictor=_oracle)

    def test_empty_dataset(self):
        with pytest.raises(UsageError):
            plp_eval_curve(None, None, [], [0.0], predictor=_oracle)

    def test_static_only_records_are_skipped(self, rng, small_synth):
        static = make_record(rng, "static", n=3, d=8, y=4, with_response=False)
        assert len(build_examples([static] + small_synth[:3])) == 3
        with pytest.raises(UsageError):
            plp_train([static], [], TrainConfig(**FAST))

    def test_training_is_deterministic_and_tracks_validation_loss(self, small_synth):
        config = TrainConfig(**{**FAST, "max_plp_steps": 32})
        first = plp_train(small_synth[:60], small_synth[60:80], config)
        second = plp_train(small_synth[:60], small_synth[60:80], config)
        np.testing.assert_array_equal(first.params.W, second.params.W)
        assert first.params.d_in == 16
        assert all(record.val_loss is not None for record in first.history)

    def test_trained_head_beats_zero_progress_at_late_steps(self, small_synth):
        config = TrainConfig(**{**FAST, "epochs": 10, "max_plp_steps": 64})
        result = plp_train(small_synth[:120], small_synth[120:160], config)
        curve = plp_eval_curve(result.params, result.bins, small_synth[160:], [0.0, 0.5, 0.9])
        maes = [point.mae for point in curve.checkpoints]
        assert maes[2] < maes[0]

    def test_single_bin_mae_is_deviation_from_the_center(self, small_synth):
        result = plp_train(small_synth[:30], [], TrainConfig(**{**FAST, "num_bins": 1, "epochs": 1}))
        fractions = [0.0, 0.5]
        curve = plp_eval_curve(result.params, result.bins, small_synth[30:40], fractions)
        center = max(float(result.bins.to_length(result.bins.centers)[0]), 1.0)
        errors = np.zeros((10, len(fractions)))
        for row, record in enumerate(small_synth[30:40]):
            steps = np.floor(np.asarray(fractions) * record.y).astype(np.int64)
            errors[row] = np.abs((record.y - steps) - center)
        assert [point.mae for point in curve.checkpoints] == list(errors.mean(axis=0))

    def test_zero_progress_matches_a_static_head_on_the_prompt_half(self, small_synth):
        config = TrainConfig(**{**FAST, "max_plp_steps": 32})
        result = plp_train(small_synth[:60], small_synth[60:80], config)
        d = small_synth[0].prompt.d
        static = HeadParams(result.params.W[:, :d], result.params.b)
        report = evaluate(static, result.bins, small_synth[80:100], PoolingMode.EGTP, result.params.alpha)
        curve = plp_eval_curve(result.params, result.bins, small_synth[80:100], [0.0])
        assert curve.checkpoints[0].mae == pytest.approx(report.mae, rel=1e-12)

    def test_validation_loss_falls_over_the_first_epochs(self, small_synth):
        config = TrainConfig(**{**FAST, "learning_rate": 0.005, "epochs": 3, "max_plp_steps": 32})
        result = plp_train(small_synth[:120], small_synth[120:160], config)
        losses = [record.val_loss for record in result.history]
        assert losses[0] > losses[1] > losses[2]

    def test_single_bin_head(self, small_synth):
        result = plp_train(small_synth[:30], [], TrainConfig(**{**FAST, "num_bins": 1, "epochs": 1}))
        assert result.bins.K == 1
        curve = plp_eval_curve(result.params, result.bins, small_synth[30:40], [0.0, 0.5])
        assert all(point.mae >= 0 for point in curve.checkpoints)
