"""
Progressive length prediction: at each decoding step predict the tokens still to come
from the pooled prompt concatenated with an EGTP pool of the tokens generated so far.

Step t (0-based) sees a prefix of t generated tokens and targets T - t remaining.
The empty prefix pools to the zero vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from lengthcast.errors import DomainError, UsageError
from lengthcast.models.records import ActivationRecord, HiddenSequence
from lengthcast.models.schemas import EpochRecord, PlpCheckpoint, PlpCurve, PoolingMode, TrainConfig
from lengthcast.services.head import (
    BinLayout,
    HeadGradients,
    HeadParams,
    batch_gradients,
    fit_bins,
    forward_batch,
)
from lengthcast.services.pooling import egtp_pool
from lengthcast.services.trainer import (
    InputScaler,
    NonFiniteGradientError,
    OptimizerState,
    TrainingDivergedError,
    TrainResult,
    adamw_step,
    init_head,
    target_space,
)
from lengthcast.utils.logging import get_logger
from lengthcast.utils.numerics import SeededRng

logger = get_logger("plp")

# Maps (example, prefix lengths) to remaining-length predictions in place of the head.
StepPredictor = Callable[["PlpExample", np.ndarray], np.ndarray]

# Below this log-mass prefix sums (and mass * state products) lose precision to subnormals.
_MIN_SAFE_LOG_MASS = float(np.log(np.finfo(np.float64).tiny)) + 40.0


@dataclass(frozen=True, eq=False)
class PlpExample:
    id: str
    prompt_feature: np.ndarray
    generated: HiddenSequence

    @property
    def T(self) -> int:
        return self.generated.n

    @property
    def d(self) -> int:
        return int(self.prompt_feature.size)


def plp_example(record: ActivationRecord, alpha: float = 1.0) -> Optional[PlpExample]:
    """Pool the prompt; records without response activations yield None."""
    if record.response is None:
        return None
    feature = egtp_pool(record.prompt, alpha).vector
    return PlpExample(id=record.id, prompt_feature=feature, generated=record.response)


def build_examples(records: Sequence[ActivationRecord], alpha: float = 1.0) -> List[PlpExample]:
    examples: List[PlpExample] = []
    skipped = 0
    for record in records:
        example = plp_example(record, alpha)
        if example is None:
            skipped += 1
            continue
        examples.append(example)
    if skipped:
        logger.warning("plp_example_skipped", skipped=skipped, reason="no response activations")
    return examples


def aggregate(
    prompt_feature: np.ndarray, generated_prefix: Optional[HiddenSequence], alpha: float = 1.0
) -> np.ndarray:
    """z = concat(h, g) where g is the EGTP pool of the prefix, or zeros when it is empty."""
    feature = np.asarray(prompt_feature, dtype=np.float64)
    if feature.ndim != 1 or not np.all(np.isfinite(feature)):
        raise DomainError("prompt feature must be a finite vector.")
    if generated_prefix is None:
        return np.concatenate([feature, np.zeros_like(feature)])
    if generated_prefix.d != feature.size:
        raise DomainError(f"prompt feature has d={feature.size}, generated prefix has d={generated_prefix.d}.")
    return np.concatenate([feature, egtp_pool(generated_prefix, alpha).vector])


def remaining_target(T: int, t: int) -> int:
    if T < 1:
        raise DomainError(f"response length must be >= 1, got {T}.")
    if not 0 <= t < T:
        raise DomainError(f"step {t} outside [0, {T - 1}].")
    return T - t


def step_features(example: PlpExample, prefix_lengths: Sequence[int], alpha: float = 1.0) -> np.ndarray:
    """
    Head inputs for several prefix lengths at once (rows follow ``prefix_lengths``).

    Prefix pools come from cumulative sums of exp((H - max H) / alpha); equal to
    ``aggregate`` up to rounding. Prefixes whose largest mass is too close to the
    float64 underflow range are pooled directly instead.
    """
    steps = np.asarray(prefix_lengths, dtype=np.int64)
    if np.any(steps < 0) or np.any(steps >= max(example.T, 1)):
        raise DomainError(f"prefix lengths must lie in [0, {example.T - 1}].")
    generated = example.generated
    scaled = (generated.entropies - generated.entropies.max()) / alpha
    mass = np.exp(scaled)
    cumulative_mass = np.concatenate([[0.0], np.cumsum(mass)])
    cumulative_states = np.vstack([np.zeros(example.d), np.cumsum(mass[:, None] * generated.states, axis=0)])
    # Largest scaled entropy inside each prefix; index 0 is the empty prefix.
    prefix_peak = np.concatenate([[0.0], np.maximum.accumulate(scaled)])[steps]
    nonempty = steps > 0
    direct = nonempty & (prefix_peak < _MIN_SAFE_LOG_MASS)
    summed = nonempty & ~direct
    pooled = np.zeros((steps.size, example.d))
    pooled[summed] = cumulative_states[steps[summed]] / cumulative_mass[steps[summed], None]
    if np.any(direct):
        logger.debug("prefix_pool_fallback", id=example.id, steps=int(direct.sum()))
        for row in np.flatnonzero(direct):
            pooled[row] = egtp_pool(generated.prefix(int(steps[row])), alpha).vector
    prompt = np.broadcast_to(example.prompt_feature, (steps.size, example.d))
    return np.hstack([prompt, pooled])


def plp_sequence_loss(
    example: PlpExample,
    params: HeadParams,
    bins: BinLayout,
    alpha: float = 1.0,
    steps: Optional[Sequence[int]] = None,
) -> HeadGradients:
    """
    Mean joint loss over the sequence's steps (all T by default) and its gradients.

    dh holds one row per step.
    """
    if params.d_in != 2 * example.d:
        raise DomainError(f"PLP head needs d_in = {2 * example.d}, got {params.d_in}.")
    if example.T < 1:
        raise DomainError(f"example {example.id} has no generated tokens.")
    steps = np.arange(example.T) if steps is None else np.asarray(steps, dtype=np.int64)
    inputs = step_features(example, steps, alpha)
    targets = example.T - steps
    return batch_gradients(params, inputs, targets, bins)


def subsample_steps(T: int, budget: int, rng: SeededRng) -> np.ndarray:
    """All steps when T <= budget, else one uniformly drawn step per equal-width stratum."""
    if T <= budget:
        return np.arange(T)
    bounds = np.floor(np.arange(budget + 1) * T / budget).astype(np.int64)
    return np.array([int(rng.integers(lo, hi)) for lo, hi in zip(bounds[:-1], bounds[1:])], dtype=np.int64)


def _training_rows(
    examples: Sequence[PlpExample], alpha: float, budget: int, rng: SeededRng
) -> List[Tuple[np.ndarray, np.ndarray]]:
    rows = []
    for example in examples:
        steps = subsample_steps(example.T, budget, rng)
        rows.append((step_features(example, steps, alpha), (example.T - steps).astype(np.float64)))
    return rows


def _mean_sequence_loss(
    params: HeadParams, bins: BinLayout, rows: Sequence[Tuple[np.ndarray, np.ndarray]]
) -> Tuple[float, float]:
    """(mean per-sequence loss, MAE over every step) for validation."""
    losses = []
    errors = []
    for inputs, targets in rows:
        losses.append(batch_gradients(params, inputs, targets, bins).loss)
        predicted = np.maximum(bins.to_length(forward_batch(params, inputs, bins).y_hat), 1.0)
        errors.append(np.abs(targets - predicted))
    return float(np.mean(losses)), float(np.mean(np.concatenate(errors)))


def plp_train(
    train_set: Sequence[ActivationRecord],
    val_set: Sequence[ActivationRecord],
    config: TrainConfig,
) -> TrainResult:
    """
    Train a 2d-input head on the per-sequence mean step loss.

    Bins are fit on remaining-length targets pooled over every training step.
    Sequences longer than ``max_plp_steps`` contribute a seeded stratified subsample
    of steps. Each batch weighs its sequences equally.
    """
    train_examples = build_examples(train_set, config.alpha)
    if not train_examples:
        raise UsageError("PLP training needs records with response activations.")
    val_examples = build_examples(val_set, config.alpha)
    rng = SeededRng(config.seed)
    train_rows = _training_rows(train_examples, config.alpha, config.max_plp_steps, rng)
    val_rows = _training_rows(val_examples, config.alpha, config.max_plp_steps, rng.spawn(1)) if val_examples else []
    if not val_rows:
        logger.warning("validation_set_empty", selection="train_mae")
        val_rows = train_rows

    scaler = InputScaler.fit(np.vstack([inputs for inputs, _ in train_rows]), config.standardize)
    train_rows = [(scaler.transform(inputs), targets) for inputs, targets in train_rows]
    val_rows = [(scaler.transform(inputs), targets) for inputs, targets in val_rows]
    all_targets = np.concatenate([targets for _, targets in train_rows]).astype(np.int64)
    bins = fit_bins(all_targets, config.num_bins, config.bin_scheme, target_space(config))
    params = init_head(bins, 2 * train_examples[0].d, config, pooling=PoolingMode.EGTP)
    state = OptimizerState.for_params(params)
    result = TrainResult(params=scaler.fold(params), bins=bins)
    best_mae = np.inf
    logger.info(
        "plp_training_started",
        sequences=len(train_examples),
        steps=int(all_targets.size),
        bins=bins.K,
        epochs=config.epochs,
    )
    for epoch in range(config.epochs):
        order = SeededRng(config.seed).spawn(epoch).permutation(len(train_rows))
        losses = []
        for batch_index, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [train_rows[i] for i in order[start : start + config.batch_size]]
            inputs = np.vstack([rows for rows, _ in batch])
            targets = np.concatenate([targets for _, targets in batch])
            weights = np.concatenate([np.full(t.size, 1.0 / (t.size * len(batch))) for _, t in batch])
            grads = batch_gradients(params, inputs, targets, bins, weights)
            if not np.isfinite(grads.loss):
                logger.error("training_diverged", epoch=epoch, batch=batch_index, loss=repr(grads.loss))
                raise TrainingDivergedError(epoch, batch_index, f"loss={grads.loss!r}")
            try:
                params, state = adamw_step(params, state, grads, config)
            except NonFiniteGradientError as exc:
                logger.error("training_diverged", epoch=epoch, batch=batch_index, error=str(exc))
                raise TrainingDivergedError(epoch, batch_index, str(exc)) from exc
            losses.append(grads.loss)
        val_loss, val_mae = _mean_sequence_loss(params, bins, val_rows)
        train_loss = float(np.mean(losses))
        result.history.append(EpochRecord(epoch=epoch, train_loss=train_loss, val_mae=val_mae, val_loss=val_loss))
        if val_mae < best_mae:
            best_mae = val_mae
            result.params = scaler.fold(params)
            result.best_epoch = epoch
        logger.info("plp_epoch_complete", epoch=epoch, train_loss=train_loss, val_loss=val_loss, val_mae=val_mae)
    return result


def plp_eval_curve(
    params: Optional[HeadParams],
    bins: Optional[BinLayout],
    dataset: Sequence[ActivationRecord],
    fractions: Sequence[float],
    alpha: Optional[float] = None,
    predictor: Optional[StepPredictor] = None,
) -> PlpCurve:
    """
    Remaining-length MAE at step floor(f * T) of every sequence, per fraction f.

    ``predictor`` maps (example, steps) to remaining-length predictions and replaces
    the head when given. ``alpha`` defaults to the head's training temperature.
    """
    if not dataset:
        raise UsageError("PLP evaluation set is empty.")
    values = [float(f) for f in fractions]
    if not values or any(not 0.0 <= f < 1.0 for f in values):
        raise UsageError(f"fractions must lie in [0, 1), got {values}.")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise UsageError(f"fractions must be strictly increasing, got {values}.")
    if predictor is None and (params is None or bins is None):
        raise UsageError("plp_eval_curve needs a head and bins or a predictor.")
    if alpha is None:
        alpha = params.alpha if params is not None else 1.0
    examples = build_examples(dataset, alpha)
    if not examples:
        raise UsageError("PLP evaluation needs records with response activations.")

    errors = np.zeros((len(examples), len(values)))
    for row, example in enumerate(examples):
        steps = np.floor(np.asarray(values) * example.T).astype(np.int64)
        if predictor is not None:
            predicted = np.asarray(predictor(example, steps), dtype=np.float64)
        else:
            inputs = step_features(example, steps, alpha)
            predicted = bins.to_length(forward_batch(params, inputs, bins).y_hat)
        errors[row] = np.abs((example.T - steps) - np.maximum(predicted, 1.0))
    maes = errors.mean(axis=0)
    curve = PlpCurve(checkpoints=[PlpCheckpoint(fraction=f, mae=float(m)) for f, m in zip(values, maes)])
    logger.info("plp_curve_evaluated", sequences=len(examples), fractions=values, maes=[float(m) for m in maes])
    return curve
