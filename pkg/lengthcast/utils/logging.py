import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any, List, Optional

import structlog  # type: ignore

PLAIN = logging.Formatter("%(message)s")


def _handlers(level: int, log_file: Optional[str], max_bytes: int, backup_count: int) -> List[logging.Handler]:
    # Logs go to stderr; stdout carries the command result only.
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        log_path = Path(log_file).expanduser()
        log_path.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(
            RotatingFileHandler(log_path, maxBytes=max_bytes, backupCount=backup_count, encoding="utf-8")
        )
    for handler in handlers:
        handler.setLevel(level)
        handler.setFormatter(PLAIN)
    return handlers


def configure_logging(
    level: str = "INFO",
    log_file: Optional[str] = None,
    log_max_bytes: int = 10485760,
    log_backup_count: int = 5,
) -> None:
    """
    Route structlog JSON events to stderr and, when ``log_file`` is set, a rotating file.

    Safe to call once per CLI invocation; previous handlers and bound run context are dropped.
    """
    log_level = getattr(logging, level.upper(), logging.INFO)
    root_logger = logging.getLogger()
    root_logger.setLevel(log_level)
    root_logger.handlers.clear()
    for handler in _handlers(log_level, log_file, log_max_bytes, log_backup_count):
        root_logger.addHandler(handler)

    structlog.contextvars.clear_contextvars()
    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.format_exc_info,
            structlog.processors.JSONRenderer(sort_keys=True),
        ],
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=False,
    )


def bind_run_context(**values: Any) -> None:
    """Attach key/values (subcommand, seed, ...) to every event logged for the rest of the run."""
    structlog.contextvars.bind_contextvars(**{k: v for k, v in values.items() if v is not None})


def get_logger(name: str, **initial_values: Any) -> structlog.stdlib.BoundLogger:
    logger = structlog.get_logger(name)
    # Stay lazy so loggers created at import time pick up configure_logging().
    return logger.bind(**initial_values) if initial_values else logger
