from __future__ import annotations

from typing import Dict, List, Tuple

import numpy as np
import pytest

from lengthcast.models.records import ActivationRecord, HiddenSequence
from lengthcast.models.schemas import PoolingMode, SynthConfig, TrainConfig
from lengthcast.services.dataio import split
from lengthcast.services.synth import synth_generate
from lengthcast.services.trainer import TrainResult, train

# The published learning rate (2e-5) barely moves a zero-initialised head within ten
# epochs at this scale; end-to-end checks train longer with a larger step.
E2E_TRAIN = dict(learning_rate=0.02, epochs=150, batch_size=16, seed=42)
E2E_PLP_TRAIN = dict(learning_rate=0.03, epochs=60, batch_size=16, seed=42)


def make_sequence(rng: np.random.Generator, n: int, d: int) -> HiddenSequence:
    return HiddenSequence(rng.normal(size=(n, d)), rng.uniform(0.0, 3.0, size=n))


def make_record(rng: np.random.Generator, record_id: str, n: int, d: int, y: int, with_response: bool = True) -> ActivationRecord:
    response = make_sequence(rng, y, d) if with_response else None
    return ActivationRecord(id=record_id, prompt=make_sequence(rng, n, d), response=response, y=y)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(42)


@pytest.fixture
def small_records(rng) -> List[ActivationRecord]:
    return [make_record(rng, f"r{i}", n=3 + i, d=4, y=2 + 3 * i) for i in range(3)]


@pytest.fixture(scope="session")
def small_synth() -> List[ActivationRecord]:
    return synth_generate(SynthConfig(num_records=200, d=8, max_length=256, length_mu=4.0, length_sigma=0.6, seed=7))


@pytest.fixture(scope="session")
def default_synth() -> List[ActivationRecord]:
    return synth_generate(SynthConfig())


@pytest.fixture(scope="session")
def default_splits(default_synth) -> Tuple[List[ActivationRecord], ...]:
    return split(default_synth, (3, 1, 1), seed=42)


@pytest.fixture(scope="session")
def trained_by_pooling(default_splits) -> Dict[PoolingMode, TrainResult]:
    train_set, val_set, _ = default_splits
    return {
        mode: train(train_set, val_set, TrainConfig(pooling=mode, **E2E_TRAIN))
        for mode in PoolingMode
    }


@pytest.fixture(scope="session")
def trained_egtp(trained_by_pooling) -> TrainResult:
    return trained_by_pooling[PoolingMode.EGTP]
