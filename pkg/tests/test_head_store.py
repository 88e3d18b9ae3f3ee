import numpy as np
import pytest

import struct

from lengthcast.models.schemas import BinScheme, PoolingMode, TargetSpace
from lengthcast.services.head import BinLayout, HeadParams, fit_bins
from lengthcast.services.head_store import (
    HeadFormatError,
    head_from_bytes,
    head_to_bytes,
    load_head,
    save_head,
)


@pytest.fixture
def head_and_bins(rng):
    bins = fit_bins(rng.integers(1, 500, size=100), 6, BinScheme.QUANTILE, TargetSpace.LOG)
    params = HeadParams(
        rng.normal(size=(bins.K, 5)), rng.normal(size=bins.K), loss_lambda=0.9, norm_scale=3.5,
        pooling=PoolingMode.MEAN, alpha=0.5,
    )
    return params, bins


class TestHeadStore:
    def test_file_round_trip(self, tmp_path, head_and_bins):
        params, bins = head_and_bins
        path = tmp_path / "head.flhd"
        save_head(path, params, bins)
        loaded, loaded_bins = load_head(path)
        np.testing.assert_array_equal(loaded.W, params.W)
        np.testing.assert_array_equal(loaded.b, params.b)
        np.testing.assert_array_equal(loaded_bins.edges, bins.edges)
        assert loaded.loss_lambda == 0.9
        assert loaded.norm_scale == 3.5
        assert loaded.pooling is PoolingMode.MEAN
        assert loaded.alpha == 0.5
        assert loaded_bins.scheme is BinScheme.QUANTILE
        assert loaded_bins.space is TargetSpace.LOG
        assert head_to_bytes(loaded, loaded_bins) == path.read_bytes()

    def test_layout_size(self, head_and_bins):
        params, bins = head_and_bins
        K, d = params.K, params.d_in
        assert len(head_to_bytes(params, bins)) == 52 + 8 * ((K + 1) + K + K * d + K)
        assert head_to_bytes(params, bins)[:4] == b"FLHD"

    def test_bad_magic(self, head_and_bins):
        payload = bytearray(head_to_bytes(*head_and_bins))
        payload[:4] = b"XXXX"
        with pytest.raises(HeadFormatError, match="magic"):
            head_from_bytes(bytes(payload))

    def test_unknown_pooling_code(self, head_and_bins):
        payload = bytearray(head_to_bytes(*head_and_bins))
        struct.pack_into("<I", payload, 40, 9)
        with pytest.raises(HeadFormatError, match="pooling"):
            head_from_bytes(bytes(payload))

    def test_default_head_keeps_egtp(self):
        bins = BinLayout(edges=[0.0, 1.0, 2.0])
        loaded, _ = head_from_bytes(head_to_bytes(HeadParams.zeros(2, 3), bins))
        assert loaded.pooling is PoolingMode.EGTP
        assert loaded.alpha == 1.0

    def test_truncated(self, head_and_bins):
        payload = head_to_bytes(*head_and_bins)
        with pytest.raises(HeadFormatError):
            head_from_bytes(payload[:-8])
        with pytest.raises(HeadFormatError):
            head_from_bytes(payload[:10])

    def test_mismatched_bins(self):
        with pytest.raises(HeadFormatError):
            head_to_bytes(HeadParams.zeros(3, 2), BinLayout(edges=[0.0, 1.0, 2.0]))
