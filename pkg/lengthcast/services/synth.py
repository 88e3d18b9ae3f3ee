"""
Planted-signal synthetic activations.

Informative prompt tokens carry high entropy and the normalized response length in
coordinate 0; uninformative tokens carry low entropy and noise. Response tokens carry
the normalized remaining length in coordinate 0 and normalized position in coordinate 1.
"""

from __future__ import annotations

import math
from typing import List

import numpy as np

from lengthcast.models.records import ActivationRecord, HiddenSequence
from lengthcast.models.schemas import SynthConfig
from lengthcast.utils.logging import get_logger
from lengthcast.utils.numerics import SeededRng

logger = get_logger("synth")

_MAX_DRAWS = 10_000


def _draw_length(rng: SeededRng, config: SynthConfig) -> int:
    """Lognormal length rejection-sampled onto [1, max_length] after rounding."""
    for _ in range(_MAX_DRAWS):
        value = int(round(float(rng.lognormal(config.length_mu, config.length_sigma))))
        if 1 <= value <= config.max_length:
            return value
    # mu far outside [0, ln max_length]; fall back to the nearest admissible length
    return int(np.clip(round(math.exp(config.length_mu)), 1, config.max_length))


def _prompt(rng: SeededRng, config: SynthConfig, y: int) -> HiddenSequence:
    n = int(rng.integers(config.prompt_len_min, config.prompt_len_max + 1))
    informative = rng.choice(n, size=math.ceil(config.signal_fraction * n), replace=False)
    states = rng.normal(0.0, 1.0, size=(n, config.d))
    states[:, 0] = rng.normal(0.0, config.noise_sigma, size=n) if config.noise_sigma > 0 else 0.0
    states[informative, 0] += y / config.max_length
    entropies = np.full(n, config.signal_entropy_lo)
    entropies[informative] = config.signal_entropy_hi
    return HiddenSequence(states, entropies)


def _response(rng: SeededRng, config: SynthConfig, y: int) -> HiddenSequence:
    steps = np.arange(y, dtype=np.float64)
    states = rng.normal(0.0, 1.0, size=(y, config.d))
    noise = rng.normal(0.0, config.noise_sigma, size=y) if config.noise_sigma > 0 else 0.0
    states[:, 0] = (y - steps) / config.max_length + noise
    states[:, 1] = steps / config.max_length
    return HiddenSequence(states, np.full(y, config.signal_entropy_lo))


def synth_generate(config: SynthConfig) -> List[ActivationRecord]:
    """Records "rec-00000", "rec-00001", ... fully determined by ``config``."""
    rng = SeededRng(config.seed)
    records: List[ActivationRecord] = []
    for index in range(config.num_records):
        y = _draw_length(rng, config)
        prompt = _prompt(rng, config, y)
        response = _response(rng, config, y) if config.include_response else None
        records.append(ActivationRecord(id=f"rec-{index:05d}", prompt=prompt, response=response, y=y))
    lengths = np.array([record.y for record in records], dtype=np.float64)
    logger.info(
        "synth_generated",
        records=len(records),
        d=config.d,
        seed=config.seed,
        mean_length=float(lengths.mean()),
        median_length=float(np.median(lengths)),
    )
    return records
