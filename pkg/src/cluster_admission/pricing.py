"""Hourly variance-based pricing and the savings from labeling deployment types separately."""
from __future__ import annotations

import logging
import math
from typing import Any, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .belief import BeliefState
from .common_utils import validate_label
from .moments import LookaheadGrid, MomentProfile, moment_profile
from .population import PopulationModel

logger = logging.getLogger(__name__)


class PricingConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kappa1: float = Field(ge=0)
    kappa2: float = Field(ge=0)
    # Leading steps of the first look-ahead horizon that feed the variance estimate; None means all.
    variance_window_steps: Optional[int] = Field(None, ge=1)


class TypeProfile(BaseModel):
    """Population model of one deployment type; its variance comes from the projected moments."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    population: PopulationModel
    cores: int = Field(1, ge=1)
    grid: LookaheadGrid = Field(default_factory=LookaheadGrid)


class LabeledType(BaseModel):
    """One deployment type: a variance given outright or a profile to derive it from."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    label: str
    mean_size: float = Field(ge=0)
    variance: Optional[float] = Field(None, ge=0)
    profile: Optional[TypeProfile] = None
    mix_weight: float = Field(1.0, ge=0, le=1)

    @field_validator("label")
    @classmethod
    def _label(cls, value: str) -> str:
        return validate_label(value)

    @model_validator(mode="after")
    def _one_variance_source(self) -> "LabeledType":
        if (self.variance is None) == (self.profile is None):
            raise ValueError("give exactly one of variance and profile")
        return self


class PricingMixture(BaseModel):
    """A pricing scheme plus the deployment types a user runs, read from one config file."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    pricing: PricingConfig
    types: list[LabeledType]
    active_cores: Optional[float] = Field(None, ge=0)


def _check_mixture(types: Sequence[LabeledType]) -> None:
    if not types:
        raise ValueError("a mixture needs at least one type")
    unresolved = [t.label for t in types if t.variance is None]
    if unresolved:
        raise ValueError(f"no variance yet for: {', '.join(unresolved)}; call resolve_variances first")
    total = math.fsum(t.mix_weight for t in types)
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"mix weights must sum to 1, got {total}")


def hourly_price(active_cores: float, var_estimate: float, cfg: PricingConfig) -> float:
    if active_cores < 0 or var_estimate < 0:
        raise ValueError("active cores and variance must be non-negative")
    return cfg.kappa1 * active_cores + cfg.kappa2 * var_estimate


def mixture_mean(types: Sequence[LabeledType]) -> float:
    _check_mixture(types)
    return math.fsum(t.mix_weight * t.mean_size for t in types)


def mixture_variance(types: Sequence[LabeledType]) -> float:
    """Law of total variance: mean of the variances plus variance of the means."""
    mean = mixture_mean(types)
    within = math.fsum(t.mix_weight * t.variance for t in types)
    between = math.fsum(t.mix_weight * (t.mean_size - mean) ** 2 for t in types)
    return within + between


def labeling_savings(types: Sequence[LabeledType], cfg: PricingConfig) -> float:
    """Expected hourly saving from submitting each type under its own label."""
    mean = mixture_mean(types)
    # mixture_variance minus the within-type term.
    between = math.fsum(t.mix_weight * (t.mean_size - mean) ** 2 for t in types)
    return cfg.kappa2 * between


def deployment_variance_estimate(profile: MomentProfile, cfg: PricingConfig) -> float:
    """Largest projected variance over the leading steps of the shortest horizon."""
    v = profile.v_L[0]
    if cfg.variance_window_steps is not None:
        v = v[: cfg.variance_window_steps + 1]
    return float(np.max(v))


def profile_variance(profile: TypeProfile, cfg: PricingConfig) -> float:
    """Variance estimate of a fresh deployment of the type, believed to follow its population."""
    moments = moment_profile(BeliefState.from_population(profile.population), profile.cores, profile.grid)
    return deployment_variance_estimate(moments, cfg)


def resolve_variances(types: Sequence[LabeledType], cfg: PricingConfig) -> list[LabeledType]:
    """Types with every profile replaced by the variance it implies."""
    resolved = []
    for t in types:
        if t.variance is None:
            assert t.profile is not None
            variance = profile_variance(t.profile, cfg)
            logger.info(f"Type '{t.label}': variance {variance:.6g} from its population profile")
            t = t.model_copy(update={"variance": variance, "profile": None})
        resolved.append(t)
    return resolved


def price_table(types: Sequence[LabeledType], cfg: PricingConfig, *, active_cores: Optional[float] = None) -> list[dict[str, Any]]:
    """Per-label rows plus one row for the unlabeled mixture.

    Core counts default to each type's mean size.
    """
    _check_mixture(types)
    rows = []
    for t in types:
        cores = t.mean_size if active_cores is None else active_cores
        rows.append(
            {
                "label": t.label,
                "mix_weight": t.mix_weight,
                "mean_size": t.mean_size,
                "variance": t.variance,
                "hourly_price": hourly_price(cores, t.variance, cfg),
            }
        )
    mean = mixture_mean(types)
    variance = mixture_variance(types)
    cores = mean if active_cores is None else active_cores
    rows.append(
        {
            "label": "mixture",
            "mix_weight": 1.0,
            "mean_size": mean,
            "variance": variance,
            "hourly_price": hourly_price(cores, variance, cfg),
        }
    )
    logger.debug(f"Mixture of {len(types)} types priced at {rows[-1]['hourly_price']:.6g} per hour")
    return rows
