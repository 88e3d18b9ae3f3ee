import numpy as np
import pytest
from pydantic import ValidationError

from lengthcast.models.schemas import SynthConfig
from lengthcast.services.synth import synth_generate


def _small(**overrides) -> SynthConfig:
    values = dict(num_records=40, d=4, max_length=256, length_mu=4.0, length_sigma=0.6, seed=3)
    values.update(overrides)
    return SynthConfig(**values)


class TestSynthGenerate:
    def test_same_config_same_records(self):
        first, second = synth_generate(_small()), synth_generate(_small())
        assert [r.id for r in first] == [r.id for r in second]
        for a, b in zip(first, second):
            assert a.y == b.y
            np.testing.assert_array_equal(a.prompt.states, b.prompt.states)
            np.testing.assert_array_equal(a.response.states, b.response.states)

    def test_seed_changes_records(self):
        first, second = synth_generate(_small(seed=1)), synth_generate(_small(seed=2))
        assert [r.y for r in first] != [r.y for r in second]

    def test_ids_and_ranges(self):
        config = _small(prompt_len_min=5, prompt_len_max=9)
        records = synth_generate(config)
        assert [r.id for r in records[:3]] == ["rec-00000", "rec-00001", "rec-00002"]
        for record in records:
            assert 1 <= record.y <= config.max_length
            assert 5 <= record.prompt.n <= 9
            assert record.T == record.y
            assert record.d == 4

    def test_planted_signal_without_noise(self):
        config = _small(noise_sigma=0.0, signal_fraction=0.25)
        for record in synth_generate(config):
            informative = record.prompt.entropies == config.signal_entropy_hi
            assert informative.sum() == int(np.ceil(0.25 * record.prompt.n))
            np.testing.assert_allclose(record.prompt.states[informative, 0], record.y / config.max_length)
            np.testing.assert_allclose(record.prompt.states[~informative, 0], 0.0)
            np.testing.assert_allclose(record.prompt.entropies[~informative], config.signal_entropy_lo)

    def test_response_tracks_remaining_length(self):
        config = _small(noise_sigma=0.0)
        record = synth_generate(config)[0]
        steps = np.arange(record.y)
        np.testing.assert_allclose(record.response.states[:, 0], (record.y - steps) / config.max_length)
        np.testing.assert_allclose(record.response.states[:, 1], steps / config.max_length)

    def test_static_only(self):
        records = synth_generate(_small(include_response=False))
        assert all(r.response is None and r.T == 0 for r in records)

    def test_length_distribution_is_right_skewed(self, default_synth):
        lengths = np.array([r.y for r in default_synth])
        assert len(default_synth) == 2500
        assert lengths.mean() > np.median(lengths)
        assert np.log(lengths).mean() == pytest.approx(5.0, abs=0.1)
        assert lengths.max() <= 1024

    @pytest.mark.parametrize(
        "overrides",
        [dict(num_records=0), dict(d=1), dict(signal_fraction=0.0), dict(prompt_len_min=10, prompt_len_max=5)],
    )
    def test_rejects_invalid_config(self, overrides):
        with pytest.raises(ValidationError):
            _small(**overrides)
