from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

from lengthcast.models.schemas import EpochRecord, PlpCurve, PredictionReport, SimReport
from lengthcast.utils.logging import get_logger

logger = get_logger("report_persistence")


def config_line(config: Dict[str, Any]) -> str:
    """First line of every report: the resolved config as sorted-key JSON."""
    return "# config: " + json.dumps(config, sort_keys=True, default=str)


def _format(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def render_csv(columns: Sequence[str], rows: Iterable[Sequence[Any]], config: Optional[Dict[str, Any]] = None) -> str:
    """CSV with LF endings, '.' decimals and shortest round-tripping floats."""
    buffer = io.StringIO()
    if config is not None:
        buffer.write(config_line(config) + "\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_format(value) for value in row])
    return buffer.getvalue()


def save_csv(
    path: str | Path,
    columns: Sequence[str],
    rows: Iterable[Sequence[Any]],
    config: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write a report CSV; I/O failures are logged and re-raised."""
    path = Path(path)
    text = render_csv(columns, rows, config)
    try:
        path.write_text(text, encoding="utf-8", newline="")
    except OSError as exc:
        logger.error("report_save_failed", path=str(path), error=str(exc))
        raise
    logger.info("report_saved", path=str(path), bytes=len(text.encode("utf-8")))
    return path


def history_rows(history: Sequence[EpochRecord], with_val_loss: bool = False) -> List[List[Any]]:
    if with_val_loss:
        return [[row.epoch, row.train_loss, row.val_mae, row.val_loss] for row in history]
    return [[row.epoch, row.train_loss, row.val_mae] for row in history]


def save_history(path: str | Path, history: Sequence[EpochRecord], config: Dict[str, Any]) -> Path:
    with_val_loss = any(row.val_loss is not None for row in history)
    columns = ["epoch", "train_loss", "val_mae"] + (["val_loss"] if with_val_loss else [])
    return save_csv(path, columns, history_rows(history, with_val_loss), config)


def save_predictions(path: str | Path, report: PredictionReport) -> Path:
    rows = [[row.id, row.y_true, row.y_hat] for row in report.rows]
    return save_csv(path, ["id", "y_true", "y_hat"], rows, report.config)


def save_curve(path: str | Path, curve: PlpCurve, config: Dict[str, Any]) -> Path:
    rows = [[point.fraction, point.mae] for point in curve.checkpoints]
    return save_csv(path, ["fraction", "mae"], rows, config)


def save_policy_table(path: str | Path, reports: Sequence[SimReport], config: Dict[str, Any]) -> Path:
    rows = [[report.policy, report.throughput, report.mean_jct, report.padding_ratio] for report in reports]
    return save_csv(path, ["policy", "throughput", "mean_jct", "padding_ratio"], rows, config)
