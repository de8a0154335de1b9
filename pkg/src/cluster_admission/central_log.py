from __future__ import annotations

import json
import os
import sys
import logging
from logging.handlers import RotatingFileHandler
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Optional

from . import __version__
from .common_utils import jsonable

LOG_DIR_ENV = "CLUSTER_ADMISSION_LOG_DIR"
EVENTS_FILE = "events.jsonl"
EVENT_LOG_MAX_BYTES = 1024 * 1024

# One file logger per events file.
_event_loggers: dict[Path, logging.Logger] = {}


def default_log_root() -> Path:
    override = os.getenv(LOG_DIR_ENV, "").strip()
    if override:
        return Path(override)
    # Workspace-relative. This file lives in src/cluster_admission/, so go up two.
    return Path(__file__).resolve().parent.parent.parent / "logs"


def configure_logging(log_dir: Optional[os.PathLike[str] | str] = None, *, debug: bool = False) -> Path:
    """Install the run log, the shared error log and a console handler on the root logger.

    Safe to call more than once; handlers already pointing at the same files are kept.
    Returns the log directory in use.
    """
    root_path = Path(log_dir) if log_dir else default_log_root()
    root_path.mkdir(parents=True, exist_ok=True)

    detailed_formatter = logging.Formatter("%(asctime)s [%(levelname)s] [%(name)s] %(message)s")
    simple_formatter = logging.Formatter("%(asctime)s [%(levelname)s] %(message)s")

    root_logger = logging.getLogger()
    root_logger.setLevel(logging.DEBUG if debug else logging.INFO)

    existing = {
        str(getattr(h, "baseFilename", "")) for h in root_logger.handlers if isinstance(h, RotatingFileHandler)
    }

    run_log = root_path / "run.log"
    if os.path.abspath(run_log) not in existing:
        main_handler = RotatingFileHandler(run_log, maxBytes=5 * 1024 * 1024, backupCount=3, encoding="utf-8")
        main_handler.setLevel(logging.DEBUG if debug else logging.INFO)
        main_handler.setFormatter(detailed_formatter)
        root_logger.addHandler(main_handler)

    # Error log handler (ERROR and above only) - shared across all commands
    error_log = root_path / "errors.log"
    if os.path.abspath(error_log) not in existing:
        error_handler = RotatingFileHandler(error_log, maxBytes=5 * 1024 * 1024, backupCount=3, encoding="utf-8")
        error_handler.setLevel(logging.ERROR)
        error_handler.setFormatter(detailed_formatter)
        root_logger.addHandler(error_handler)

    if not any(getattr(h, "_cluster_admission_console", False) for h in root_logger.handlers):
        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setLevel(logging.DEBUG if debug else logging.INFO)
        console_handler.setFormatter(simple_formatter)
        console_handler._cluster_admission_console = True  # type: ignore[attr-defined]
        root_logger.addHandler(console_handler)

    return root_path


def _event_logger(path: Path) -> logging.Logger:
    event_logger = _event_loggers.get(path)
    if event_logger is None:
        event_logger = logging.getLogger(f"cluster_admission.events.{len(_event_loggers)}")
        event_logger.setLevel(logging.INFO)
        event_logger.propagate = False
        handler = RotatingFileHandler(path, maxBytes=EVENT_LOG_MAX_BYTES, backupCount=1, encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(message)s"))
        event_logger.addHandler(handler)
        _event_loggers[path] = event_logger
    return event_logger


def flush_events() -> None:
    for event_logger in _event_loggers.values():
        for handler in event_logger.handlers:
            handler.flush()


def log_event(
    event: str,
    *,
    fields: Optional[Mapping[str, Any]] = None,
    log_root: Optional[os.PathLike[str] | str] = None,
    filename: str = EVENTS_FILE,
) -> Path:
    """Append one JSON line (run manifest, calibration trial, fit report) and return the file path."""
    root = Path(log_root) if log_root else default_log_root()
    root.mkdir(parents=True, exist_ok=True)
    path = root / filename

    record: dict[str, Any] = {"ts": datetime.now(timezone.utc).isoformat(), "event": event, "version": __version__}
    record.update(fields or {})
    _event_logger(path).info(json.dumps(record, ensure_ascii=False, default=jsonable))
    return path
