from __future__ import annotations

import re
from pathlib import Path
from typing import List, Tuple, Type, TypeVar

from lengthcast.errors import UsageError

EnumT = TypeVar("EnumT")


def ensure_input_file(path: str, flag: str) -> Path:
    """Validate that an input file exists before any work starts."""
    resolved = Path(path)
    if not resolved.is_file():
        raise UsageError(f"{flag}: input file {path!r} does not exist.")
    return resolved


def ensure_output_path(path: str, flag: str) -> Path:
    """Validate that an output file's directory exists and the target is not a directory."""
    resolved = Path(path)
    if resolved.is_dir():
        raise UsageError(f"{flag}: {path!r} is a directory.")
    if not resolved.parent.exists():
        raise UsageError(f"{flag}: directory {str(resolved.parent)!r} does not exist.")
    return resolved


def _split_list(raw: str, flag: str) -> List[str]:
    items = [item.strip() for item in raw.split(",")]
    if not raw.strip() or any(not item for item in items):
        raise UsageError(f"{flag}: expected a comma-separated list, got {raw!r}.")
    return items


def parse_float_list(raw: str, flag: str) -> List[float]:
    """Parse '0,0.25,0.5' style lists."""
    try:
        return [float(item) for item in _split_list(raw, flag)]
    except ValueError as exc:
        raise UsageError(f"{flag}: {raw!r} is not a list of numbers.") from exc


def parse_choice_list(raw: str, flag: str, choices: Type[EnumT]) -> List[EnumT]:
    """Parse a comma-separated list of enum values, rejecting unknown names."""
    parsed = []
    for item in _split_list(raw, flag):
        try:
            parsed.append(choices(item))
        except ValueError as exc:
            valid = ", ".join(choice.value for choice in choices)
            raise UsageError(f"{flag}: unknown value {item!r}; expected one of: {valid}.") from exc
    return parsed


def parse_ratios(raw: str, flag: str = "--ratios") -> Tuple[float, ...]:
    """Parse split ratios written as '3:1:1' or '3,1,1'."""
    parts = re.split(r"[:,]", raw)
    try:
        ratios = tuple(float(part) for part in parts)
    except ValueError as exc:
        raise UsageError(f"{flag}: {raw!r} is not a ratio list like 3:1:1.") from exc
    if len(ratios) < 2 or any(not ratio > 0 for ratio in ratios):
        raise UsageError(f"{flag}: ratios must be at least two positive numbers, got {raw!r}.")
    return ratios
