"""
Deterministic mini-batch training of the length head with AdamW, plus evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from lengthcast.errors import DomainError, LengthcastError, UsageError
from lengthcast.models.records import ActivationRecord
from lengthcast.models.schemas import (
    EpochRecord,
    PoolingMode,
    PredictionReport,
    PredictionRow,
    TargetSpace,
    TrainConfig,
)
from lengthcast.services.head import (
    BinLayout,
    HeadGradients,
    HeadParams,
    batch_gradients,
    fit_bins,
    forward_batch,
)
from lengthcast.services.pooling import pool_prompts
from lengthcast.utils.logging import get_logger
from lengthcast.utils.numerics import SeededRng

logger = get_logger("trainer")


class NonFiniteGradientError(LengthcastError):
    """Raised by the optimizer instead of propagating NaN/inf into the parameters."""


class TrainingDivergedError(LengthcastError):
    def __init__(self, epoch: int, batch: int, detail: str) -> None:
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


@dataclass(eq=False)
class OptimizerState:
    m_W: np.ndarray
    v_W: np.ndarray
    m_b: np.ndarray
    v_b: np.ndarray
    t: int = 0

    @classmethod
    def for_params(cls, params: HeadParams) -> "OptimizerState":
        return cls(
            m_W=np.zeros_like(params.W),
            v_W=np.zeros_like(params.W),
            m_b=np.zeros_like(params.b),
            v_b=np.zeros_like(params.b),
        )


def _adamw_update(
    theta: np.ndarray, m: np.ndarray, v: np.ndarray, g: np.ndarray, t: int, config: TrainConfig
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    m = config.beta1 * m + (1.0 - config.beta1) * g
    v = config.beta2 * v + (1.0 - config.beta2) * g * g
    m_hat = m / (1.0 - config.beta1**t)
    v_hat = v / (1.0 - config.beta2**t)
    theta = theta - config.learning_rate * (m_hat / (np.sqrt(v_hat) + config.epsilon) + config.weight_decay * theta)
    return theta, m, v


def adamw_step(
    params: HeadParams, state: OptimizerState, grads: HeadGradients, config: TrainConfig
) -> Tuple[HeadParams, OptimizerState]:
    """One bias-corrected AdamW step with decoupled weight decay; inputs are not mutated."""
    if grads.dW.shape != params.W.shape or grads.db.shape != params.b.shape:
        raise DomainError(
            f"gradient shapes {grads.dW.shape}/{grads.db.shape} do not match "
            f"parameters {params.W.shape}/{params.b.shape}."
        )
    if state.m_W.shape != params.W.shape or state.m_b.shape != params.b.shape:
        raise DomainError("optimizer state shapes do not match the parameters.")
    if not (np.all(np.isfinite(grads.dW)) and np.all(np.isfinite(grads.db))):
        raise NonFiniteGradientError(
            f"non-finite gradient at optimizer step {state.t + 1} "
            f"(|dW|max={np.nanmax(np.abs(grads.dW))!r}, |db|max={np.nanmax(np.abs(grads.db))!r})."
        )
    t = state.t + 1
    W, m_W, v_W = _adamw_update(params.W, state.m_W, state.v_W, grads.dW, t, config)
    b, m_b, v_b = _adamw_update(params.b, state.m_b, state.v_b, grads.db, t, config)
    updated = params.with_weights(W, b)
    return updated, OptimizerState(m_W=m_W, v_W=v_W, m_b=m_b, v_b=v_b, t=t)


@dataclass(eq=False)
class TrainResult:
    params: HeadParams
    bins: BinLayout
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0


def target_space(config: TrainConfig) -> TargetSpace:
    return TargetSpace.LOG if config.log_scale else TargetSpace.LINEAR


def init_head(
    bins: BinLayout, d_in: int, config: TrainConfig, pooling: Optional[PoolingMode] = None
) -> HeadParams:
    """Zero-initialised head; the MSE term is scaled by the largest bin edge when normalize_mse is set."""
    norm_scale = float(bins.edges[-1]) if config.normalize_mse else 1.0
    return HeadParams.zeros(
        bins.K,
        d_in,
        loss_lambda=config.loss_lambda,
        norm_scale=norm_scale,
        pooling=PoolingMode(pooling or config.pooling),
        alpha=config.alpha,
    )


@dataclass(frozen=True, eq=False)
class InputScaler:
    """Per-coordinate affine map x -> (x - mean) / scale; identity when disabled."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, inputs: np.ndarray, enabled: bool = True) -> "InputScaler":
        d = inputs.shape[1]
        if not enabled:
            return cls(mean=np.zeros(d), scale=np.ones(d))
        scale = inputs.std(axis=0)
        # Constant coordinates are centred only.
        scale[scale <= 1e-12] = 1.0
        return cls(mean=inputs.mean(axis=0), scale=scale)

    def transform(self, inputs: np.ndarray) -> np.ndarray:
        return (inputs - self.mean) / self.scale

    def fold(self, params: HeadParams) -> HeadParams:
        """Head on raw inputs equivalent to ``params`` on transformed inputs."""
        W = params.W / self.scale[None, :]
        b = params.b - W @ self.mean
        return params.with_weights(W, b)


def fit_epoch(
    params: HeadParams,
    state: OptimizerState,
    inputs: np.ndarray,
    lengths: np.ndarray,
    bins: BinLayout,
    config: TrainConfig,
    epoch: int,
) -> Tuple[HeadParams, OptimizerState, float]:
    """One shuffled pass; returns the updated head, state and mean batch loss."""
    order = SeededRng(config.seed).spawn(epoch).permutation(len(lengths))
    losses: List[float] = []
    for batch_index, start in enumerate(range(0, len(order), config.batch_size)):
        rows = order[start : start + config.batch_size]
        grads = batch_gradients(params, inputs[rows], lengths[rows], bins)
        if not np.isfinite(grads.loss):
            logger.error("training_diverged", epoch=epoch, batch=batch_index, loss=repr(grads.loss))
            raise TrainingDivergedError(epoch, batch_index, f"loss={grads.loss!r}")
        try:
            params, state = adamw_step(params, state, grads, config)
        except NonFiniteGradientError as exc:
            logger.error("training_diverged", epoch=epoch, batch=batch_index, error=str(exc))
            raise TrainingDivergedError(epoch, batch_index, str(exc)) from exc
        losses.append(grads.loss)
    return params, state, float(np.mean(losses))


def mean_absolute_error(params: HeadParams, inputs: np.ndarray, lengths: np.ndarray, bins: BinLayout) -> float:
    predicted = np.maximum(bins.to_length(forward_batch(params, inputs, bins).y_hat), 1.0)
    return float(np.mean(np.abs(lengths - predicted)))


def train(
    train_set: Sequence[ActivationRecord],
    val_set: Sequence[ActivationRecord],
    config: TrainConfig,
) -> TrainResult:
    """
    Fit bins on training lengths, then train a zero-initialised head for
    ``config.epochs`` epochs and return the snapshot with the best validation MAE.

    Epoch e shuffles with seed + e. Without a validation set the training MAE is used.
    """
    if not train_set:
        raise UsageError("training set is empty.")
    train_inputs = pool_prompts(train_set, config.pooling, config.alpha)
    train_lengths = np.array([record.y for record in train_set], dtype=np.float64)
    if val_set:
        val_inputs = pool_prompts(val_set, config.pooling, config.alpha)
        val_lengths = np.array([record.y for record in val_set], dtype=np.float64)
    else:
        logger.warning("validation_set_empty", selection="train_mae")
        val_inputs, val_lengths = train_inputs, train_lengths

    scaler = InputScaler.fit(train_inputs, config.standardize)
    train_inputs = scaler.transform(train_inputs)
    val_inputs = scaler.transform(val_inputs)
    bins = fit_bins(train_lengths.astype(np.int64), config.num_bins, config.bin_scheme, target_space(config))
    params = init_head(bins, train_inputs.shape[1], config)
    state = OptimizerState.for_params(params)
    result = TrainResult(params=scaler.fold(params), bins=bins)
    best_mae = np.inf
    logger.info(
        "training_started",
        records=len(train_set),
        val_records=len(val_set),
        pooling=PoolingMode(config.pooling).value,
        bins=bins.K,
        epochs=config.epochs,
    )
    for epoch in range(config.epochs):
        params, state, train_loss = fit_epoch(params, state, train_inputs, train_lengths, bins, config, epoch)
        val_mae = mean_absolute_error(params, val_inputs, val_lengths, bins)
        result.history.append(EpochRecord(epoch=epoch, train_loss=train_loss, val_mae=val_mae))
        if val_mae < best_mae:
            best_mae = val_mae
            result.params = scaler.fold(params)
            result.best_epoch = epoch
        logger.info("epoch_complete", epoch=epoch, train_loss=train_loss, val_mae=val_mae)
    logger.info("training_finished", best_epoch=result.best_epoch, best_val_mae=float(best_mae))
    return result


def report_from_predictions(
    ids: Sequence[str],
    y_true: Sequence[float],
    y_hat: Sequence[float],
    config: Optional[Dict[str, object]] = None,
) -> PredictionReport:
    """Clamp predictions to >= 1 token and compute MAE and RMSE."""
    truths = np.asarray(y_true, dtype=np.float64)
    predictions = np.maximum(np.asarray(y_hat, dtype=np.float64), 1.0)
    if truths.size == 0 or truths.shape != predictions.shape or len(ids) != truths.size:
        raise DomainError("ids, truths and predictions must be non-empty and equally long.")
    errors = truths - predictions
    rows = [
        PredictionRow(id=item, y_true=int(truth), y_hat=float(prediction))
        for item, truth, prediction in zip(ids, truths, predictions)
    ]
    return PredictionReport(
        rows=rows,
        mae=float(np.mean(np.abs(errors))),
        rmse=float(np.sqrt(np.mean(errors**2))),
        config=dict(config or {}),
    )


def evaluate(
    params: HeadParams,
    bins: BinLayout,
    dataset: Sequence[ActivationRecord],
    pooling: Optional[PoolingMode] = None,
    alpha: Optional[float] = None,
    config: Optional[Dict[str, object]] = None,
) -> PredictionReport:
    """MAE/RMSE of clamped predictions; pooling and alpha default to the ones the head was trained with."""
    if not dataset:
        raise UsageError("evaluation set is empty.")
    pooling = params.pooling if pooling is None else PoolingMode(pooling)
    alpha = params.alpha if alpha is None else alpha
    if pooling is not params.pooling:
        logger.info("cross_pooling_evaluation", trained=params.pooling.value, evaluated=pooling.value)
    inputs = pool_prompts(dataset, pooling, alpha)
    predictions = bins.to_length(forward_batch(params, inputs, bins).y_hat)
    report = report_from_predictions(
        [record.id for record in dataset], [record.y for record in dataset], predictions, config
    )
    logger.info("evaluation_complete", records=report.count, mae=report.mae, rmse=report.rmse)
    return report


def lambda_sweep(
    train_set: Sequence[ActivationRecord],
    val_set: Sequence[ActivationRecord],
    test_set: Sequence[ActivationRecord],
    config: TrainConfig,
    lambdas: Sequence[float],
) -> List[Dict[str, float]]:
    """Retrain once per loss weight; rows of (lambda, best_val_mae, test_mae)."""
    rows = []
    for value in lambdas:
        run_config = TrainConfig(**{**config.dict(), "loss_lambda": float(value)})
        result = train(train_set, val_set, run_config)
        test = evaluate(result.params, result.bins, test_set, run_config.pooling, run_config.alpha)
        best = result.history[result.best_epoch].val_mae
        rows.append({"lambda": float(value), "best_val_mae": best, "test_mae": test.mae})
        logger.info("lambda_sweep_point", loss_lambda=float(value), best_val_mae=best, test_mae=test.mae)
    return rows


def pooling_ablation(
    train_set: Sequence[ActivationRecord],
    val_set: Sequence[ActivationRecord],
    test_set: Sequence[ActivationRecord],
    config: TrainConfig,
    modes: Sequence[PoolingMode] = tuple(PoolingMode),
) -> List[Dict[str, object]]:
    """Retrain once per pooling mode; rows of (pooling, best_val_mae, test_mae)."""
    rows: List[Dict[str, object]] = []
    for mode in modes:
        mode = PoolingMode(mode)
        run_config = TrainConfig(**{**config.dict(), "pooling": mode})
        result = train(train_set, val_set, run_config)
        test = evaluate(result.params, result.bins, test_set, mode, run_config.alpha)
        best = result.history[result.best_epoch].val_mae
        rows.append({"pooling": mode.value, "best_val_mae": best, "test_mae": test.mae})
        logger.info("pooling_ablation_point", pooling=mode.value, best_val_mae=best, test_mae=test.mae)
    return rows
