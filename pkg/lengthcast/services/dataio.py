"""
FLEN activation dumps, their JSONL sidecar manifest, and dataset splitting.

Layout (little-endian): magic b"FLEN", u32 version, u32 d; then per record
u32 n, u32 T, u32 y, (n+T)*d f32 hidden states (prompt rows first, row-major),
(n+T) f32 entropies. See docs/format.md.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from lengthcast.errors import LengthcastError, UsageError
from lengthcast.models.records import ActivationRecord, HiddenSequence
from lengthcast.models.schemas import DumpHeader, DumpManifestEntry
from lengthcast.utils.logging import get_logger
from lengthcast.utils.numerics import SeededRng

logger = get_logger("dataio")

MAGIC = b"FLEN"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_RECORD = struct.Struct("<III")
MANIFEST_SUFFIX = ".manifest.jsonl"


class DumpFormatError(LengthcastError):
    """Base for dump decoding failures; ``kind`` names the failure."""

    kind = "format"


class MagicMismatchError(DumpFormatError):
    kind = "magic-mismatch"


class UnsupportedVersionError(DumpFormatError):
    kind = "unsupported-version"


class TruncatedDumpError(DumpFormatError):
    kind = "truncated"


class OffsetOutOfRangeError(DumpFormatError):
    kind = "offset-out-of-range"


class EmptyPromptError(DumpFormatError):
    kind = "empty-prompt"


class ManifestMismatchError(DumpFormatError):
    kind = "manifest-mismatch"


@contextmanager
def _logged_format_errors(path: str | Path) -> Iterator[None]:
    try:
        yield
    except DumpFormatError as exc:
        logger.error("dump_format_error", path=str(path), kind=exc.kind, error=str(exc))
        raise


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + MANIFEST_SUFFIX)


def _encode_record(record: ActivationRecord) -> bytes:
    if record.response is None:
        states, entropies = record.prompt.states, record.prompt.entropies
    else:
        states = np.vstack([record.prompt.states, record.response.states])
        entropies = np.concatenate([record.prompt.entropies, record.response.entropies])
    return (
        _RECORD.pack(record.prompt.n, record.T, record.y)
        + np.ascontiguousarray(states, dtype="<f4").tobytes()
        + np.ascontiguousarray(entropies, dtype="<f4").tobytes()
    )


def dump_to_bytes(records: Sequence[ActivationRecord]) -> Tuple[bytes, List[DumpManifestEntry]]:
    """Encode records and return the payload with one manifest entry per record."""
    if not records:
        raise UsageError("cannot write an empty dump.")
    d = records[0].d
    ids = set()
    chunks = [_HEADER.pack(MAGIC, VERSION, d)]
    entries: List[DumpManifestEntry] = []
    offset = _HEADER.size
    for record in records:
        if record.d != d:
            raise UsageError(f"record {record.id} has d={record.d}, dump has d={d}.")
        if record.id in ids:
            raise UsageError(f"duplicate record id {record.id!r}.")
        ids.add(record.id)
        chunk = _encode_record(record)
        entries.append(
            DumpManifestEntry(id=record.id, byte_offset=offset, n=record.prompt.n, T=record.T, y=record.y)
        )
        chunks.append(chunk)
        offset += len(chunk)
    return b"".join(chunks), entries


def write_dump(records: Sequence[ActivationRecord], path: str | Path, note: Optional[str] = None) -> Path:
    """Write the FLEN file and its sidecar manifest; returns the manifest path."""
    path = Path(path)
    payload, entries = dump_to_bytes(records)
    header = DumpHeader(magic=MAGIC.decode("ascii"), version=VERSION, d=records[0].d, note=note)
    lines = [json.dumps(header.dict(), sort_keys=True)]
    lines.extend(json.dumps(entry.dict(), sort_keys=True) for entry in entries)
    path.write_bytes(payload)
    sidecar = manifest_path(path)
    sidecar.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("dump_written", path=str(path), records=len(entries), d=header.d, bytes=len(payload))
    return sidecar


def _parse_header(payload: bytes) -> DumpHeader:
    if len(payload) < _HEADER.size:
        raise TruncatedDumpError(f"dump has {len(payload)} bytes; the header needs {_HEADER.size}.")
    magic, version, d = _HEADER.unpack_from(payload)
    if magic != MAGIC:
        raise MagicMismatchError(f"bad magic {magic!r}, expected {MAGIC!r}.")
    if version != VERSION:
        raise UnsupportedVersionError(f"dump version {version} is not supported (expected {VERSION}).")
    if d < 1:
        raise DumpFormatError(f"dump declares hidden dimension d={d}.")
    return DumpHeader(magic=magic.decode("ascii"), version=version, d=d)


def _decode_record(payload: bytes, offset: int, d: int, record_id: str) -> Tuple[ActivationRecord, int]:
    if offset < _HEADER.size or offset >= len(payload):
        raise OffsetOutOfRangeError(f"record {record_id} offset {offset} outside [{_HEADER.size}, {len(payload)}).")
    if offset + _RECORD.size > len(payload):
        raise TruncatedDumpError(f"record {record_id} header cut off at byte {offset}.")
    n, T, y = _RECORD.unpack_from(payload, offset)
    if n == 0:
        raise EmptyPromptError(f"record {record_id} at byte {offset} has an empty prompt.")
    rows = n + T
    start = offset + _RECORD.size
    end = start + 4 * rows * (d + 1)
    if end > len(payload):
        raise TruncatedDumpError(f"record {record_id} needs {end - offset} bytes from offset {offset}; file ends at {len(payload)}.")
    states = np.frombuffer(payload, dtype="<f4", count=rows * d, offset=start).astype(np.float64).reshape(rows, d)
    entropies = np.frombuffer(payload, dtype="<f4", count=rows, offset=start + 4 * rows * d).astype(np.float64)
    try:
        prompt = HiddenSequence(states[:n], entropies[:n])
        response = HiddenSequence(states[n:], entropies[n:]) if T else None
        record = ActivationRecord(id=record_id, prompt=prompt, response=response, y=y)
    except ValueError as exc:
        raise DumpFormatError(f"record {record_id} at byte {offset} is invalid: {exc}") from exc
    return record, end


def read_header(path: str | Path) -> DumpHeader:
    with open(path, "rb") as handle, _logged_format_errors(path):
        return _parse_header(handle.read(_HEADER.size))


def read_manifest(path: str | Path) -> Tuple[DumpHeader, List[DumpManifestEntry]]:
    """Parse the sidecar manifest of ``path``; offsets must be strictly increasing."""
    with _logged_format_errors(manifest_path(path)):
        return _read_manifest(path)


def _read_manifest(path: str | Path) -> Tuple[DumpHeader, List[DumpManifestEntry]]:
    sidecar = manifest_path(path)
    lines = [line for line in sidecar.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not lines:
        raise ManifestMismatchError(f"manifest {sidecar} is empty.")
    try:
        header = DumpHeader(**json.loads(lines[0]))
        entries = [DumpManifestEntry(**json.loads(line)) for line in lines[1:]]
    except (ValueError, TypeError) as exc:
        raise ManifestMismatchError(f"manifest {sidecar} is malformed: {exc}") from exc
    offsets = [entry.byte_offset for entry in entries]
    if any(b <= a for a, b in zip(offsets, offsets[1:])):
        raise ManifestMismatchError(f"manifest {sidecar} offsets are not strictly increasing.")
    return header, entries


def read_dump(path: str | Path) -> List[ActivationRecord]:
    """
    Read every record of a dump.

    With a manifest, each entry's offset is resolved and its (n, T, y) checked against
    the record found there. Without one, records are read sequentially and named by
    position ("0", "1", ...).
    """
    path = Path(path)
    payload = path.read_bytes()
    with _logged_format_errors(path):
        header, records = _decode_dump(path, payload)
    logger.info("dump_read", path=str(path), records=len(records), d=header.d)
    return records


def _decode_dump(path: Path, payload: bytes) -> Tuple[DumpHeader, List[ActivationRecord]]:
    header = _parse_header(payload)
    records: List[ActivationRecord] = []
    if manifest_path(path).exists():
        manifest_header, entries = _read_manifest(path)
        if manifest_header.d != header.d:
            raise ManifestMismatchError(f"manifest says d={manifest_header.d}, dump says d={header.d}.")
        end = _HEADER.size
        for entry in entries:
            record, end = _decode_record(payload, entry.byte_offset, header.d, entry.id)
            if (record.prompt.n, record.T, record.y) != (entry.n, entry.T, entry.y):
                raise ManifestMismatchError(
                    f"record {entry.id}: manifest (n={entry.n}, T={entry.T}, y={entry.y}) disagrees with "
                    f"dump (n={record.prompt.n}, T={record.T}, y={record.y})."
                )
            records.append(record)
        if end != len(payload):
            raise ManifestMismatchError(f"manifest lists {len(entries)} records but {len(payload) - end} bytes remain.")
    else:
        logger.warning("manifest_missing", path=str(path))
        offset = _HEADER.size
        while offset < len(payload):
            record, offset = _decode_record(payload, offset, header.d, str(len(records)))
            records.append(record)
    return header, records


def split(
    records: Sequence[ActivationRecord], ratios: Sequence[float] = (3, 1, 1), seed: int = 42
) -> Tuple[List[ActivationRecord], ...]:
    """
    Seeded shuffle, then contiguous parts of size floor(N * r_k / sum r) for every
    part after the first; the first part (train) takes the remainder.
    """
    ratios = [float(r) for r in ratios]
    if len(ratios) < 2 or any(not r > 0 for r in ratios):
        raise UsageError(f"split ratios must be at least two positive numbers, got {ratios}.")
    total = len(records)
    if total < len(ratios):
        raise UsageError(f"cannot split {total} records into {len(ratios)} parts.")
    order = SeededRng(seed).permutation(total)
    shuffled = [records[i] for i in order]
    weight = sum(ratios)
    sizes = [int(np.floor(total * r / weight)) for r in ratios[1:]]
    sizes.insert(0, total - sum(sizes))
    parts = []
    start = 0
    for size in sizes:
        parts.append(shuffled[start : start + size])
        start += size
    logger.info("dataset_split", records=total, sizes=sizes, seed=seed)
    return tuple(parts)
