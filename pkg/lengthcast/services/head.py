"""
Soft-label distribution head: length bins, soft targets, the linear K-way head,
its joint CE + MSE loss and the closed-form gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from lengthcast.errors import DomainError
from lengthcast.models.schemas import BinScheme, PoolingMode, TargetSpace
from lengthcast.utils.logging import get_logger
from lengthcast.utils.numerics import log_softmax, softmax

logger = get_logger("head")


class DegenerateBinsError(DomainError):
    """Raised when the requested bins cannot be separated by the training lengths."""


@dataclass(frozen=True, eq=False)
class BinLayout:
    """K right-closed bins over the target space: bin i covers (edges[i], edges[i+1]]."""

    edges: np.ndarray
    scheme: BinScheme = BinScheme.QUANTILE
    space: TargetSpace = TargetSpace.LINEAR
    centers: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        edges = np.array(self.edges, dtype=np.float64)
        if edges.ndim != 1 or edges.size < 2:
            raise DomainError("bin edges must hold K+1 >= 2 values.")
        if not np.all(np.isfinite(edges)) or edges[0] < 0.0:
            raise DomainError("bin edges must be finite and non-negative.")
        if np.any(np.diff(edges) <= 0.0):
            raise DomainError("bin edges must be strictly increasing.")
        edges.setflags(write=False)
        centers = (edges[:-1] + edges[1:]) / 2.0
        centers.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "scheme", BinScheme(self.scheme))
        object.__setattr__(self, "space", TargetSpace(self.space))

    @property
    def K(self) -> int:
        return int(self.centers.size)

    def to_target(self, lengths) -> np.ndarray:
        """Map token lengths into the space the head regresses."""
        values = np.asarray(lengths, dtype=np.float64)
        return np.log(values) if self.space is TargetSpace.LOG else values

    def to_length(self, targets) -> np.ndarray:
        values = np.asarray(targets, dtype=np.float64)
        return np.exp(values) if self.space is TargetSpace.LOG else values

    def locate(self, targets) -> Tuple[np.ndarray, int]:
        """
        Bin index (0-based) of each target value and how many were clamped.

        A value exactly on an upper edge belongs to that bin. Values above the last
        edge clamp into the last bin; values at or below edge 0 fall into the first.
        """
        values = np.atleast_1d(np.asarray(targets, dtype=np.float64))
        raw = np.searchsorted(self.edges, values, side="left") - 1
        clamped = int(np.count_nonzero(raw >= self.K))
        return np.clip(raw, 0, self.K - 1), clamped


def _quantile_edges(values: np.ndarray, K: int) -> np.ndarray:
    inner = np.quantile(values, np.arange(1, K) / K)
    return np.unique(np.concatenate(([0.0], inner, [values.max()])))


def _fit_edges(values: np.ndarray, K: int, scheme: BinScheme) -> np.ndarray:
    top = float(values.max())
    if top <= 0.0:
        raise DegenerateBinsError("bins need a positive largest target.")
    if scheme is BinScheme.EQUAL_WIDTH or K == 1:
        return np.linspace(0.0, top, K + 1)
    if np.all(values == values[0]):
        raise DegenerateBinsError(
            f"all {values.size} training targets equal {values[0]!r}; cannot place {K} quantile bins."
        )
    return _quantile_edges(values, K)


def fit_bins(
    lengths: Sequence[int],
    K: int,
    scheme: BinScheme = BinScheme.QUANTILE,
    space: TargetSpace = TargetSpace.LINEAR,
) -> BinLayout:
    """
    Fit K bins with edge_0 = 0 and edge_K = max target.

    Quantile edges that coincide are merged, so the returned layout may hold fewer
    than K bins. In log space edges are placed over ln(length).
    """
    values = np.asarray(lengths, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise DomainError("fit_bins needs a non-empty list of lengths.")
    if np.any(values < 1) or np.any(values != np.round(values)):
        raise DomainError("lengths must be positive integers.")
    if K < 1:
        raise DomainError(f"K must be >= 1, got {K}.")
    scheme = BinScheme(scheme)
    space = TargetSpace(space)
    targets = np.log(values) if space is TargetSpace.LOG else values
    if space is TargetSpace.LOG and targets.max() <= 0.0:
        raise DegenerateBinsError("log-space bins need at least one length above 1.")
    edges = _fit_edges(targets, K, scheme)
    layout = BinLayout(edges=edges, scheme=scheme, space=space)
    if layout.K < K:
        logger.info("bins_merged", requested=K, fitted=layout.K, scheme=scheme.value)
    return layout


def soft_label_matrix(indices: np.ndarray, K: int) -> np.ndarray:
    """Rows p_j = exp(-|j - i|) / sum_k exp(-|k - i|) for each true bin index i."""
    distance = np.abs(np.arange(K)[None, :] - np.asarray(indices)[:, None])
    return softmax(-distance.astype(np.float64), axis=1)


def soft_label(y: int, bins: BinLayout) -> np.ndarray:
    """Soft target over ``bins`` for a true length ``y`` (tokens)."""
    if y < 1:
        raise DomainError(f"length must be >= 1, got {y}.")
    index, clamped = bins.locate(bins.to_target(y))
    if clamped:
        logger.debug("soft_label_clamped", y=int(y), upper_edge=float(bins.edges[-1]))
    return soft_label_matrix(index, bins.K)[0]


@dataclass(eq=False)
class HeadParams:
    """
    Linear head u = W h + b over K bins; mutated only by the owning training loop.

    ``pooling`` and ``alpha`` record how the training inputs were pooled so a saved head
    is evaluated on the same features.
    """

    W: np.ndarray
    b: np.ndarray
    loss_lambda: float = 0.95
    norm_scale: float = 1.0
    pooling: PoolingMode = PoolingMode.EGTP
    alpha: float = 1.0

    def __post_init__(self) -> None:
        self.W = np.array(self.W, dtype=np.float64)
        self.b = np.array(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise DomainError(f"head shapes disagree: W {self.W.shape}, b {self.b.shape}.")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise DomainError("head parameters must be finite.")
        if not 0.0 <= self.loss_lambda <= 1.0:
            raise DomainError(f"lambda must lie in [0, 1], got {self.loss_lambda}.")
        if not self.norm_scale > 0.0:
            raise DomainError(f"norm_scale must be positive, got {self.norm_scale}.")
        self.pooling = PoolingMode(self.pooling)
        if not (np.isfinite(self.alpha) and self.alpha > 0.0):
            raise DomainError(f"alpha must be a positive real, got {self.alpha!r}.")

    @classmethod
    def zeros(
        cls,
        K: int,
        d_in: int,
        loss_lambda: float = 0.95,
        norm_scale: float = 1.0,
        pooling: PoolingMode = PoolingMode.EGTP,
        alpha: float = 1.0,
    ) -> "HeadParams":
        return cls(np.zeros((K, d_in)), np.zeros(K), loss_lambda, norm_scale, pooling, alpha)

    @property
    def K(self) -> int:
        return int(self.W.shape[0])

    @property
    def d_in(self) -> int:
        return int(self.W.shape[1])

    def with_weights(self, W: np.ndarray, b: np.ndarray) -> "HeadParams":
        """New head with these weights and the same loss and pooling settings."""
        return HeadParams(W, b, self.loss_lambda, self.norm_scale, self.pooling, self.alpha)

    def copy(self) -> "HeadParams":
        return self.with_weights(self.W.copy(), self.b.copy())


@dataclass(frozen=True, eq=False)
class HeadOutput:
    """Predicted bin distribution and its expected value (target space)."""

    logits: np.ndarray
    p_hat: np.ndarray
    y_hat: float
    space: TargetSpace = TargetSpace.LINEAR

    @property
    def length(self) -> float:
        """Prediction in tokens."""
        return float(np.exp(self.y_hat)) if self.space is TargetSpace.LOG else float(self.y_hat)


@dataclass(eq=False)
class BatchOutput:
    logits: np.ndarray
    p_hat: np.ndarray
    y_hat: np.ndarray


@dataclass(eq=False)
class HeadGradients:
    dW: np.ndarray
    db: np.ndarray
    dh: np.ndarray
    loss: float


def _check_compatible(params: HeadParams, bins: BinLayout, d_in: int) -> None:
    if params.K != bins.K:
        raise DomainError(f"head has {params.K} outputs but the bin layout has {bins.K} bins.")
    if d_in != params.d_in:
        raise DomainError(f"head expects inputs of length {params.d_in}, got {d_in}.")


def forward_batch(params: HeadParams, inputs: np.ndarray, bins: BinLayout) -> BatchOutput:
    """Forward pass for a stack of inputs (m x d_in)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2:
        raise DomainError(f"batch inputs must be a matrix, got shape {inputs.shape}.")
    _check_compatible(params, bins, inputs.shape[1])
    logits = inputs @ params.W.T + params.b
    p_hat = softmax(logits, axis=1)
    return BatchOutput(logits=logits, p_hat=p_hat, y_hat=p_hat @ bins.centers)


def forward(params: HeadParams, h: np.ndarray, bins: BinLayout) -> HeadOutput:
    """u = W h + b; p_hat = softmax(u); y_hat = p_hat . centers."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 1:
        raise DomainError(f"head input must be a vector, got shape {h.shape}.")
    batch = forward_batch(params, h[None, :], bins)
    return HeadOutput(
        logits=batch.logits[0],
        p_hat=batch.p_hat[0],
        y_hat=float(batch.y_hat[0]),
        space=bins.space,
    )


def _target(y: float, space: TargetSpace) -> float:
    return float(np.log(y)) if space is TargetSpace.LOG else float(y)


def joint_loss(p: np.ndarray, out: HeadOutput, y: int, params: HeadParams) -> float:
    """L = lambda * CE(p, p_hat) + (1 - lambda) * ((y - y_hat) / norm_scale)^2."""
    if y < 1:
        raise DomainError(f"length must be >= 1, got {y}.")
    p = np.asarray(p, dtype=np.float64)
    if p.shape != out.logits.shape:
        raise DomainError("soft label and head output disagree on the number of bins.")
    cross_entropy = -float(np.dot(p, log_softmax(out.logits)))
    error = (_target(y, out.space) - out.y_hat) / params.norm_scale
    return params.loss_lambda * cross_entropy + (1.0 - params.loss_lambda) * error**2


def _logit_gradients(
    params: HeadParams,
    batch: BatchOutput,
    labels: np.ndarray,
    targets: np.ndarray,
    bins: BinLayout,
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-row dL/du and per-row loss."""
    lam = params.loss_lambda
    scale_sq = params.norm_scale**2
    residual = batch.y_hat - targets
    spread = batch.p_hat * (bins.centers[None, :] - batch.y_hat[:, None])
    grad_u = lam * (batch.p_hat - labels) + (1.0 - lam) * (2.0 * residual / scale_sq)[:, None] * spread
    cross_entropy = -np.sum(labels * log_softmax(batch.logits, axis=1), axis=1)
    losses = lam * cross_entropy + (1.0 - lam) * residual**2 / scale_sq
    return grad_u, losses


def batch_gradients(
    params: HeadParams,
    inputs: np.ndarray,
    lengths: Sequence[int],
    bins: BinLayout,
    weights: Optional[np.ndarray] = None,
) -> HeadGradients:
    """
    Weighted-mean joint loss over rows and its gradients.

    ``weights`` default to uniform 1/m; dh holds each row's own input gradient.
    """
    lengths = np.asarray(lengths, dtype=np.float64)
    if np.any(lengths < 1):
        raise DomainError("lengths must be >= 1.")
    batch = forward_batch(params, inputs, bins)
    m = batch.logits.shape[0]
    if lengths.shape != (m,):
        raise DomainError(f"expected {m} lengths, got shape {lengths.shape}.")
    if weights is None:
        weights = np.full(m, 1.0 / m)
    targets = bins.to_target(lengths)
    indices, _ = bins.locate(targets)
    labels = soft_label_matrix(indices, bins.K)
    grad_u, losses = _logit_gradients(params, batch, labels, targets, bins)
    weighted = grad_u * weights[:, None]
    return HeadGradients(
        dW=weighted.T @ np.asarray(inputs, dtype=np.float64),
        db=weighted.sum(axis=0),
        dh=grad_u @ params.W,
        loss=float(np.dot(weights, losses)),
    )


def loss_gradients(params: HeadParams, h: np.ndarray, y: int, bins: BinLayout) -> HeadGradients:
    """
    Closed-form gradients of the joint loss for one example.

    dL/du_i = lambda (p_hat_i - p_i) + (1 - lambda) 2 (y_hat - y) / s^2 * p_hat_i (c_i - y_hat);
    dW = dL/du h^T, db = dL/du, dh = W^T dL/du.
    """
    if y < 1:
        raise DomainError(f"length must be >= 1, got {y}.")
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 1:
        raise DomainError(f"head input must be a vector, got shape {h.shape}.")
    grads = batch_gradients(params, h[None, :], [y], bins)
    return HeadGradients(dW=grads.dW, db=grads.db, dh=grads.dh[0], loss=grads.loss)


def squared_error_input_gradient(params: HeadParams, h: np.ndarray, y: int, bins: BinLayout) -> np.ndarray:
    """Gradient of the raw squared error (y - y_hat)^2 with respect to the head input."""
    out = forward(params, h, bins)
    spread = out.p_hat * (bins.centers - out.y_hat)
    return 2.0 * (out.y_hat - _target(y, bins.space)) * (params.W.T @ spread)
