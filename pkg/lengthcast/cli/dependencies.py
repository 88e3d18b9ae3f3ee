"""
Run-configuration resolution: command-line flag > JSON config file section > model default.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path
from typing import Any, Dict, Optional, Type, TypeVar

from pydantic import BaseModel, ValidationError

from lengthcast.config import Settings, get_settings
from lengthcast.errors import UsageError
from lengthcast.models.schemas import CostModel, SynthConfig, TrainConfig
from lengthcast.utils.logging import get_logger

logger = get_logger("dependencies")

ModelT = TypeVar("ModelT", bound=BaseModel)

# Fields whose flag is not simply --field-name.
FLAG_NAMES = {"loss_lambda": "--lambda", "d": "--dim"}
SECTIONS = ("train", "synth", "cost")


def flag_name(field: str) -> str:
    return FLAG_NAMES.get(field, "--" + field.replace("_", "-"))


def get_app_settings() -> Settings:
    try:
        return get_settings()
    except ValidationError as exc:
        logger.error("settings_load_failed", error=str(exc))
        raise UsageError(f"invalid environment settings: {exc}") from exc


def load_config_file(path: Optional[str]) -> Dict[str, Dict[str, Any]]:
    """Read the optional JSON run-config; only the known sections are allowed."""
    if not path:
        return {}
    config_file = Path(path)
    if not config_file.is_file():
        raise UsageError(f"--config: file {path!r} does not exist.")
    try:
        payload = json.loads(config_file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config: {path!r} is not valid JSON ({exc.msg}, line {exc.lineno}).") from exc
    if not isinstance(payload, dict):
        raise UsageError("--config: top level must be an object.")
    unknown = sorted(set(payload) - set(SECTIONS))
    if unknown:
        raise UsageError(f"--config: unknown sections {unknown}; expected {list(SECTIONS)}.")
    for name, section in payload.items():
        if not isinstance(section, dict):
            raise UsageError(f"--config: section {name!r} must be an object.")
    logger.info("config_file_loaded", path=str(config_file), sections=sorted(payload))
    return payload


def _flag_overrides(args: argparse.Namespace, model: Type[BaseModel]) -> Dict[str, Any]:
    return {
        name: getattr(args, name)
        for name in model.__fields__
        if getattr(args, name, None) is not None
    }


def _build(
    model: Type[ModelT],
    args: argparse.Namespace,
    file_config: Dict[str, Dict[str, Any]],
    section: str,
    fallbacks: Optional[Dict[str, Any]] = None,
) -> ModelT:
    flags = _flag_overrides(args, model)
    values: Dict[str, Any] = dict(fallbacks or {})
    values.update(file_config.get(section, {}))
    values.update(flags)
    try:
        return model(**values)
    except ValidationError as exc:
        messages = []
        for error in exc.errors():
            field = str(error["loc"][0]) if error["loc"] else section
            source = flag_name(field) if field in flags else f"config {section}.{field}"
            messages.append(f"{source}: {error['msg']}")
        raise UsageError("; ".join(messages)) from exc


def resolve_train_config(
    args: argparse.Namespace, file_config: Dict[str, Dict[str, Any]], settings: Settings
) -> TrainConfig:
    return _build(TrainConfig, args, file_config, "train", {"seed": settings.default_seed})


def resolve_synth_config(
    args: argparse.Namespace, file_config: Dict[str, Dict[str, Any]], settings: Settings
) -> SynthConfig:
    return _build(SynthConfig, args, file_config, "synth", {"seed": settings.default_seed})


def resolve_cost_model(args: argparse.Namespace, file_config: Dict[str, Dict[str, Any]]) -> CostModel:
    return _build(CostModel, args, file_config, "cost")


def echo(config: BaseModel, **extra: Any) -> Dict[str, Any]:
    """JSON-ready config dict (enums as values) merged with command context."""
    payload = json.loads(config.json())
    payload.update(extra)
    return payload
