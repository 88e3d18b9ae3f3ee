"""
FLHD model file: a trained head plus its bin layout.

Layout (little-endian): magic b"FLHD", u32 version, u32 K, u32 d_in, f64 lambda,
f64 norm_scale, u32 scheme, u32 space, u32 pooling, f64 alpha, (K+1) f64 edges,
K f64 centers, K*d_in f64 W (row-major), K f64 b.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Tuple

import numpy as np

from lengthcast.errors import LengthcastError
from lengthcast.models.schemas import BinScheme, PoolingMode, TargetSpace
from lengthcast.services.head import BinLayout, HeadParams
from lengthcast.utils.logging import get_logger

logger = get_logger("head_store")

MAGIC = b"FLHD"
VERSION = 2
_PREFIX = struct.Struct("<4sIIIddIIId")
_SCHEME_CODES = {BinScheme.EQUAL_WIDTH: 0, BinScheme.QUANTILE: 1}
_SPACE_CODES = {TargetSpace.LINEAR: 0, TargetSpace.LOG: 1}
_POOLING_CODES = {PoolingMode.EGTP: 0, PoolingMode.MEAN: 1, PoolingMode.MAX: 2, PoolingMode.LAST: 3}


class HeadFormatError(LengthcastError):
    """Raised when a model file cannot be decoded."""


def _format_error(message: str) -> HeadFormatError:
    logger.error("head_format_error", error=message)
    return HeadFormatError(message)


def _decode(codes: dict, code: int, what: str):
    for name, value in codes.items():
        if value == code:
            return name
    raise _format_error(f"unknown {what} code {code}.")


def head_to_bytes(params: HeadParams, bins: BinLayout) -> bytes:
    """Serialize head and bins; equal inputs always give equal bytes."""
    if params.K != bins.K:
        raise _format_error(f"head has {params.K} outputs but bins define {bins.K}.")
    prefix = _PREFIX.pack(
        MAGIC,
        VERSION,
        params.K,
        params.d_in,
        float(params.loss_lambda),
        float(params.norm_scale),
        _SCHEME_CODES[bins.scheme],
        _SPACE_CODES[bins.space],
        _POOLING_CODES[params.pooling],
        float(params.alpha),
    )
    body = b"".join(
        np.ascontiguousarray(array, dtype="<f8").tobytes()
        for array in (bins.edges, bins.centers, params.W, params.b)
    )
    return prefix + body


def head_from_bytes(payload: bytes) -> Tuple[HeadParams, BinLayout]:
    if len(payload) < _PREFIX.size:
        raise _format_error(f"model file truncated: {len(payload)} bytes, header needs {_PREFIX.size}.")
    magic, version, K, d_in, loss_lambda, norm_scale, scheme_code, space_code, pooling_code, alpha = (
        _PREFIX.unpack_from(payload)
    )
    if magic != MAGIC:
        raise _format_error(f"bad model magic {magic!r}, expected {MAGIC!r}.")
    if version != VERSION:
        raise _format_error(f"unsupported model version {version}, expected {VERSION}.")
    counts = (K + 1, K, K * d_in, K)
    expected = _PREFIX.size + 8 * sum(counts)
    if len(payload) != expected:
        raise _format_error(f"model file has {len(payload)} bytes, expected {expected}.")
    arrays = []
    offset = _PREFIX.size
    for count in counts:
        arrays.append(np.frombuffer(payload, dtype="<f8", count=count, offset=offset).astype(np.float64))
        offset += 8 * count
    edges, centers, weights, bias = arrays
    scheme = _decode(_SCHEME_CODES, scheme_code, "bin scheme")
    space = _decode(_SPACE_CODES, space_code, "target space")
    pooling = _decode(_POOLING_CODES, pooling_code, "pooling")
    bins = BinLayout(edges=edges, scheme=scheme, space=space)
    if not np.array_equal(bins.centers, centers):
        raise _format_error("stored bin centers disagree with the stored edges.")
    params = HeadParams(weights.reshape(K, d_in), bias, loss_lambda, norm_scale, pooling, alpha)
    return params, bins


def save_head(path: str | Path, params: HeadParams, bins: BinLayout) -> None:
    payload = head_to_bytes(params, bins)
    Path(path).write_bytes(payload)
    logger.info(
        "head_saved",
        path=str(path),
        K=params.K,
        d_in=params.d_in,
        pooling=params.pooling.value,
        alpha=params.alpha,
        bytes=len(payload),
    )


def load_head(path: str | Path) -> Tuple[HeadParams, BinLayout]:
    payload = Path(path).read_bytes()
    params, bins = head_from_bytes(payload)
    logger.info("head_loaded", path=str(path), K=params.K, d_in=params.d_in, pooling=params.pooling.value)
    return params, bins
