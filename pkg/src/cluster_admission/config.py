"""Loading and saving of JSON configuration documents."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, TypeVar

from pydantic import BaseModel, ValidationError

from .common_utils import safe_config_load, safe_config_save
from .errors import ConfigError
from .population import PopulationModel
from .pricing import PricingMixture
from .simulator import SimConfig

logger = logging.getLogger(__name__)

M = TypeVar("M", bound=BaseModel)


def _format_errors(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err.get("loc", ())) or "<root>"
        parts.append(f"{where}: {err.get('msg', 'invalid')}")
    return "; ".join(parts)


def read_document(path: Path | str) -> dict[str, Any]:
    path = Path(path)
    if not path.exists() and not path.with_suffix(path.suffix + ".bak").exists():
        raise ConfigError(f"config file not found: {path}")
    data = safe_config_load(path)
    if not data:
        raise ConfigError(f"config file is empty or unreadable: {path}")
    if not isinstance(data, dict):
        raise ConfigError(f"config file must hold a JSON object: {path}")
    return data


def validate_document(model: type[M], data: Any, *, source: str = "config") -> M:
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid {source}: {_format_errors(exc)}") from exc


def load_sim_config(path: Path | str) -> SimConfig:
    cfg = validate_document(SimConfig, read_document(path), source=str(path))
    logger.info(f"Loaded simulation config {path} (digest {cfg.digest()[:12]})")
    return cfg


def load_population(path: Path | str) -> PopulationModel:
    """A population file holds the model itself or a simulation config embedding one."""
    data = read_document(path)
    if "population" in data and "lambda_prior" not in data:
        data = data["population"]
    return validate_document(PopulationModel, data, source=str(path))


def load_pricing(path: Path | str) -> PricingMixture:
    return validate_document(PricingMixture, read_document(path), source=str(path))


def dump_model(model: BaseModel, path: Path | str) -> Path:
    path = Path(path)
    if not safe_config_save(path, model.model_dump(mode="json")):
        raise ConfigError(f"could not write {path}")
    return path
