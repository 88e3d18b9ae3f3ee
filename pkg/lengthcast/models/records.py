from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from lengthcast.errors import DomainError


def _frozen_array(values: np.ndarray) -> np.ndarray:
    array = np.array(values, dtype=np.float64)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class HiddenSequence:
    """Per-token hidden states (n x d) with the matching per-token entropies (nats)."""

    states: np.ndarray
    entropies: np.ndarray

    def __post_init__(self) -> None:
        states = _frozen_array(self.states)
        entropies = _frozen_array(self.entropies)
        if states.ndim != 2 or states.shape[0] < 1 or states.shape[1] < 1:
            raise DomainError(f"states must be an n x d matrix with n, d >= 1, got shape {states.shape}.")
        if entropies.shape != (states.shape[0],):
            raise DomainError(
                f"entropies must have length n={states.shape[0]}, got shape {entropies.shape}."
            )
        if not (np.all(np.isfinite(states)) and np.all(np.isfinite(entropies))):
            raise DomainError("hidden sequence contains non-finite values.")
        if np.any(entropies < 0.0):
            raise DomainError("token entropies must be non-negative.")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "entropies", entropies)

    @property
    def n(self) -> int:
        return int(self.states.shape[0])

    @property
    def d(self) -> int:
        return int(self.states.shape[1])

    def prefix(self, t: int) -> Optional["HiddenSequence"]:
        """First ``t`` tokens, or None for the empty prefix."""
        if t < 0 or t > self.n:
            raise DomainError(f"prefix length {t} outside [0, {self.n}].")
        if t == 0:
            return None
        return HiddenSequence(self.states[:t], self.entropies[:t])


@dataclass(frozen=True, eq=False)
class ActivationRecord:
    """One sequence's prompt/response activations plus its ground-truth response length."""

    id: str
    prompt: HiddenSequence
    response: Optional[HiddenSequence]
    y: int

    def __post_init__(self) -> None:
        if not self.id:
            raise DomainError("record id must be a non-empty string.")
        if int(self.y) < 1:
            raise DomainError(f"record {self.id}: response length must be >= 1, got {self.y}.")
        object.__setattr__(self, "y", int(self.y))
        if self.response is not None:
            if self.response.n != self.y:
                raise DomainError(
                    f"record {self.id}: response has {self.response.n} tokens but y={self.y}."
                )
            if self.response.d != self.prompt.d:
                raise DomainError(
                    f"record {self.id}: prompt d={self.prompt.d} differs from response d={self.response.d}."
                )

    @property
    def T(self) -> int:
        """Recorded response tokens (0 for static-only records)."""
        return 0 if self.response is None else self.response.n

    @property
    def d(self) -> int:
        return self.prompt.d
