"""
Sequence pooling (entropy-guided and baselines) and gradient-based token importance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Sequence, Union

import numpy as np

from lengthcast.errors import DomainError, UndefinedCorrelationError, UsageError
from lengthcast.models.records import ActivationRecord, HiddenSequence
from lengthcast.models.schemas import ImportanceBin, ImportanceReport, PoolingMode
from lengthcast.services.head import BinLayout, HeadParams, squared_error_input_gradient
from lengthcast.utils.logging import get_logger
from lengthcast.utils.numerics import pearson, softmax

logger = get_logger("pooling")


@dataclass(frozen=True, eq=False)
class PooledFeature:
    """Pooled vector and the token weights that produced it."""

    vector: np.ndarray
    weights: np.ndarray
    mode: PoolingMode
    # Max pooling is not a weighted sum; its weights are reported as uniform.
    affine: bool = True


def resolve_mode(mode: Union[str, PoolingMode]) -> PoolingMode:
    try:
        return PoolingMode(mode)
    except ValueError as exc:
        valid = ", ".join(m.value for m in PoolingMode)
        raise UsageError(f"unknown pooling mode {mode!r}; expected one of: {valid}.") from exc


def _check_alpha(alpha: float) -> float:
    if not np.isfinite(alpha) or alpha <= 0:
        raise DomainError(f"alpha must be a positive real, got {alpha!r}.")
    return float(alpha)


def egtp_pool(seq: HiddenSequence, alpha: float = 1.0) -> PooledFeature:
    """Weights w = softmax(H / alpha); vector = sum_i w_i h_i."""
    weights = softmax(seq.entropies, temperature=_check_alpha(alpha))
    return PooledFeature(vector=weights @ seq.states, weights=weights, mode=PoolingMode.EGTP)


def baseline_pool(seq: HiddenSequence, mode: Union[str, PoolingMode]) -> PooledFeature:
    mode = resolve_mode(mode)
    uniform = np.full(seq.n, 1.0 / seq.n)
    if mode is PoolingMode.MEAN:
        return PooledFeature(vector=seq.states.mean(axis=0), weights=uniform, mode=mode)
    if mode is PoolingMode.MAX:
        return PooledFeature(vector=seq.states.max(axis=0), weights=uniform, mode=mode, affine=False)
    if mode is PoolingMode.LAST:
        one_hot = np.zeros(seq.n)
        one_hot[-1] = 1.0
        return PooledFeature(vector=seq.states[-1].copy(), weights=one_hot, mode=mode)
    raise UsageError(f"{mode.value} is not a baseline pooling mode; use egtp_pool.")


def pool(seq: HiddenSequence, mode: Union[str, PoolingMode], alpha: float = 1.0) -> PooledFeature:
    mode = resolve_mode(mode)
    if mode is PoolingMode.EGTP:
        return egtp_pool(seq, alpha)
    return baseline_pool(seq, mode)


def pool_prompts(
    records: Sequence[ActivationRecord], mode: Union[str, PoolingMode], alpha: float = 1.0
) -> np.ndarray:
    """Stack the pooled prompt vector of every record (len(records) x d)."""
    if not records:
        raise UsageError("cannot pool an empty dataset.")
    return np.stack([pool(record.prompt, mode, alpha).vector for record in records])


def token_importance(
    seq: HiddenSequence,
    head: HeadParams,
    bins: BinLayout,
    y_true: int,
    alpha: float = 1.0,
) -> np.ndarray:
    """
    I_t = || d (y - y_hat)^2 / d h_t ||_2 through EGTP pooling.

    Entropies (hence weights) are held fixed, so d pool / d h_t = w_t * I and
    I_t = w_t * || W^T d(y - y_hat)^2 / du ||.
    """
    if y_true < 1:
        raise DomainError(f"y_true must be >= 1, got {y_true}.")
    if head.d_in != seq.d:
        raise DomainError(f"head expects inputs of length {head.d_in}, sequence has d={seq.d}.")
    pooled = egtp_pool(seq, alpha)
    grad = squared_error_input_gradient(head, pooled.vector, y_true, bins)
    return pooled.weights * float(np.linalg.norm(grad))


def summarize_entropy_importance(
    entropies: Iterable[float], importances: Iterable[float], num_bins: int = 5
) -> ImportanceReport:
    """Pearson r plus mean importance per equal-width entropy bin (empty bins report None)."""
    entropy_values = np.asarray(list(entropies), dtype=np.float64)
    importance_values = np.asarray(list(importances), dtype=np.float64)
    if num_bins < 1:
        raise UsageError(f"num_bins must be >= 1, got {num_bins}.")
    if entropy_values.size != importance_values.size or entropy_values.size == 0:
        raise DomainError("entropies and importances must be non-empty and equally long.")
    lo, hi = float(entropy_values.min()), float(entropy_values.max())
    if lo == hi:
        raise UndefinedCorrelationError(f"all {entropy_values.size} token entropies equal {lo!r}.")
    r = pearson(entropy_values, importance_values)
    edges = np.linspace(lo, hi, num_bins + 1)
    # Interior edges are left-closed; the top edge belongs to the last bin.
    index = np.clip(np.searchsorted(edges, entropy_values, side="right") - 1, 0, num_bins - 1)
    bins: List[ImportanceBin] = []
    for b in range(num_bins):
        members = importance_values[index == b]
        bins.append(
            ImportanceBin(
                entropy_lo=float(edges[b]),
                entropy_hi=float(edges[b + 1]),
                count=int(members.size),
                mean_importance=float(members.mean()) if members.size else None,
            )
        )
    return ImportanceReport(pearson_r=r, bins=bins, num_tokens=int(entropy_values.size))


def entropy_importance_report(
    dataset: Sequence[ActivationRecord],
    head: HeadParams,
    bins: BinLayout,
    alpha: float = 1.0,
    num_bins: int = 5,
) -> ImportanceReport:
    """Pool (entropy, importance) over every prompt token of the dataset, in record-id order."""
    if not dataset:
        raise UsageError("entropy/importance analysis needs a non-empty dataset.")
    entropies: List[np.ndarray] = []
    importances: List[np.ndarray] = []
    for record in sorted(dataset, key=lambda item: item.id):
        entropies.append(record.prompt.entropies)
        importances.append(token_importance(record.prompt, head, bins, record.y, alpha))
    report = summarize_entropy_importance(np.concatenate(entropies), np.concatenate(importances), num_bins)
    logger.info(
        "entropy_importance_summarized",
        records=len(dataset),
        tokens=report.num_tokens,
        pearson_r=report.pearson_r,
    )
    return report
