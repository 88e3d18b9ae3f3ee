"""
Deterministic scalar/vector primitives shared by every service module.

All arithmetic is float64. Entropy is measured in nats.
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

from lengthcast.errors import DomainError, UndefinedCorrelationError

ArrayLike = Union[Sequence[float], np.ndarray]

PROB_SUM_TOLERANCE = 1e-9
SEED_LIMIT = 2**64


def as_real_vector(values: ArrayLike, name: str = "vector") -> np.ndarray:
    """Return a finite float64 1-D copy of ``values`` or raise DomainError."""
    vector = np.array(values, dtype=np.float64)
    if vector.ndim != 1 or vector.size < 1:
        raise DomainError(f"{name} must be a non-empty 1-D sequence, got shape {vector.shape}.")
    if not np.all(np.isfinite(vector)):
        raise DomainError(f"{name} contains non-finite entries.")
    return vector


def as_prob_vector(values: ArrayLike, name: str = "probabilities") -> np.ndarray:
    """Validate a probability vector: entries in [0, 1] summing to 1 within 1e-9."""
    probs = as_real_vector(values, name)
    if np.any(probs < 0.0) or np.any(probs > 1.0):
        raise DomainError(f"{name} entries must lie in [0, 1].")
    total = float(probs.sum())
    if abs(total - 1.0) > PROB_SUM_TOLERANCE:
        raise DomainError(f"{name} must sum to 1, got {total!r}.")
    return probs


def _check_temperature(temperature: float) -> float:
    temperature = float(temperature)
    if not np.isfinite(temperature) or temperature <= 0.0:
        raise DomainError(f"temperature must be a positive finite real, got {temperature!r}.")
    return temperature


def softmax(values: ArrayLike, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    """
    Max-shifted softmax along ``axis``.

    output_i = exp(v_i/T - m) / sum_j exp(v_j/T - m) with m = max_i v_i/T.
    Accepts a vector or a stacked batch (one distribution per row).
    """
    temperature = _check_temperature(temperature)
    scaled = np.asarray(values, dtype=np.float64)
    if scaled.size < 1 or not np.all(np.isfinite(scaled)):
        raise DomainError("softmax input must be non-empty and finite.")
    scaled = scaled / temperature
    shifted = scaled - scaled.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=axis, keepdims=True)


def log_softmax(values: ArrayLike, axis: int = -1) -> np.ndarray:
    """Log-space softmax; never takes the log of a stored probability."""
    logits = np.asarray(values, dtype=np.float64)
    if logits.size < 1 or not np.all(np.isfinite(logits)):
        raise DomainError("log_softmax input must be non-empty and finite.")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def entropy(probs: ArrayLike) -> float:
    """Shannon entropy in nats with the 0*ln(0) = 0 convention."""
    p = as_prob_vector(probs)
    positive = p > 0.0
    return float(-np.sum(p[positive] * np.log(p[positive])))


def pearson(x: ArrayLike, y: ArrayLike) -> float:
    """
    Sample Pearson correlation coefficient.

    Raises UndefinedCorrelationError when both inputs are constant. When exactly one
    input is constant the covariance is zero and 0.0 is returned.
    """
    xv = as_real_vector(x, "x")
    yv = as_real_vector(y, "y")
    if xv.size != yv.size:
        raise DomainError(f"pearson inputs differ in length: {xv.size} != {yv.size}.")
    if xv.size < 2:
        raise DomainError("pearson requires at least two observations.")
    # Decided on the raw values: centring a constant like 0.1 leaves rounding residue.
    x_constant = bool(np.all(xv == xv[0]))
    y_constant = bool(np.all(yv == yv[0]))
    if x_constant and y_constant:
        raise UndefinedCorrelationError("correlation is undefined for two constant inputs.")
    if x_constant or y_constant:
        return 0.0
    dx = xv - xv.mean()
    dy = yv - yv.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        return 0.0
    r = float(np.dot(dx, dy)) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


class SeededRng:
    """
    Single-owner seeded stream over numpy's PCG64 bit generator.

    PCG64 (128-bit LCG state, XSL-RR 64-bit output) is platform independent, so one
    seed always yields the same stream. Do not share an instance across threads.
    """

    algorithm = "PCG64"

    def __init__(self, seed: int) -> None:
        seed = int(seed)
        if seed < 0 or seed >= SEED_LIMIT:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}.")
        self.seed = seed
        self._generator = np.random.Generator(np.random.PCG64(seed))

    def spawn(self, offset: int) -> "SeededRng":
        """Return an independent stream reseeded at ``seed + offset`` (mod 2**64)."""
        return SeededRng((self.seed + int(offset)) % SEED_LIMIT)

    def random(self, size: int | tuple[int, ...] | None = None) -> np.ndarray | float:
        return self._generator.random(size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._generator.normal(loc, scale, size)

    def lognormal(self, mean: float, sigma: float, size=None):
        return self._generator.lognormal(mean, sigma, size)

    def exponential(self, scale: float = 1.0, size=None):
        return self._generator.exponential(scale, size)

    def integers(self, low: int, high: int, size=None):
        """Integers in the half-open range [low, high)."""
        return self._generator.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._generator.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        return self._generator.permutation(n)
