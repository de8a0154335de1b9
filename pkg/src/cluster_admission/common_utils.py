from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import os
import shutil
import tempfile
from pathlib import Path
from typing import Any

import numpy as np

logger = logging.getLogger(__name__)

MAX_LABEL_LENGTH = 128


def validate_label(name: str) -> str:
    """Stripped label for a deployment type or trace id.

    Labels end up in CSV cells and file names, so control characters and path
    separators are refused.
    """
    name = (name or "").strip()
    if not name:
        raise ValueError("label is required")
    if len(name) > MAX_LABEL_LENGTH:
        raise ValueError(f"label longer than {MAX_LABEL_LENGTH} characters")
    if any(ord(c) < 32 for c in name) or "/" in name or "\\" in name:
        raise ValueError(f"label {name!r} contains a path separator or control character")
    return name


def jsonable(value: Any) -> Any:
    """``json.dumps`` fallback for numpy scalars, arrays and paths."""
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False, default=jsonable)


def config_digest(config_data: Any) -> str:
    """sha256 hex digest of the canonical JSON form."""
    return hashlib.sha256(canonical_json(config_data).encode("utf-8")).hexdigest()


def _backup_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".bak")


def safe_config_save(file_path: Path | str, config_data: Any) -> bool:
    """Write ``config_data`` as indented JSON through a temp file and an atomic rename.

    An existing file is copied to ``<name>.bak`` first. Returns False (after logging) on failure.
    """
    path = Path(file_path)
    tmp_name: str | None = None
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.exists():
            try:
                shutil.copy2(path, _backup_path(path))
            except OSError as exc:
                logger.warning(f"No backup of {path}: {exc}")

        fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(config_data, f, indent=2, sort_keys=True, default=jsonable)
            f.write("\n")
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, path)
        return True
    except (OSError, TypeError, ValueError) as exc:
        logger.error(f"Could not write {path}: {exc}")
        if tmp_name is not None:
            with contextlib.suppress(OSError):
                os.unlink(tmp_name)
        return False


def safe_config_load(file_path: Path | str) -> Any:
    """Parsed JSON from ``file_path``, or from its ``.bak`` when the file is missing or corrupt.

    Returns ``{}`` when neither parses.
    """
    path = Path(file_path)
    for candidate in (path, _backup_path(path)):
        if not candidate.exists():
            continue
        try:
            data = json.loads(candidate.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            logger.error(f"Unreadable JSON in {candidate}: {exc}")
            continue
        if candidate != path:
            logger.warning(f"Recovered {path} from backup {candidate}")
        return data
    return {}
