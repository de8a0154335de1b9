"""Generative model for deployments.

Population-wide Gamma priors (shape-rate parameterization) over the normalized
scale-out rate, the mean extra scale-out size and the core lifetime rate, plus the
memoryless processes every deployment follows. All times are in hours.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

logger = logging.getLogger(__name__)

# Smallest positive float; guards Gamma draws that underflow for tiny shapes.
_TINY = float(np.finfo(float).tiny)


@dataclass(frozen=True)
class GammaParams:
    shape: float
    rate: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.shape) and self.shape > 0):
            raise ValueError(f"Gamma shape must be a positive finite number, got {self.shape}")
        if not (math.isfinite(self.rate) and self.rate > 0):
            raise ValueError(f"Gamma rate must be a positive finite number, got {self.rate}")

    @property
    def mean(self) -> float:
        return self.shape / self.rate

    @property
    def var(self) -> float:
        return self.shape / (self.rate * self.rate)

    @staticmethod
    def from_mean_var(mean: float, var: float) -> "GammaParams":
        """Method-of-moments parameters for a positive mean and variance."""
        if mean <= 0 or var <= 0:
            raise ValueError("mean and variance must be positive")
        return GammaParams(shape=mean * mean / var, rate=mean / var)

    def sample(self, rng: np.random.Generator, size: Optional[int] = None):
        return rng.gamma(self.shape, 1.0 / self.rate, size=size)

    def to_dict(self) -> dict[str, float]:
        return {"shape": float(self.shape), "rate": float(self.rate)}


class PopulationModel(BaseModel):
    """Population priors plus the shutdown multiplier and the rate/lifetime power law."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    lambda_prior: GammaParams
    sigma_prior: GammaParams
    mu_prior: GammaParams
    delta: float
    nu: float
    # Size of a deployment on arrival: one scale-out (1 + Poisson(sigma)) or a single core.
    initial_size_mode: Literal["scaleout", "single"] = "scaleout"

    @field_validator("delta")
    @classmethod
    def _delta_non_negative(cls, value: float) -> float:
        # delta == 0 disables the shutdown clock (a fit that saw no shutdowns produces it).
        if not math.isfinite(value) or value < 0:
            raise ValueError("delta must be a finite number >= 0")
        return value

    @field_validator("nu")
    @classmethod
    def _nu_finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("nu must be finite")
        return value

    @model_validator(mode="after")
    def _moments_exist(self) -> "PopulationModel":
        # E[M^nu] and E[M^(2 nu)] must be finite for the look-ahead moments.
        if self.mu_prior.shape + 2.0 * min(self.nu, 0.0) <= 0:
            raise ValueError(f"nu={self.nu} too negative for mu prior shape {self.mu_prior.shape}")
        return self

    @classmethod
    def fitted_default(cls) -> "PopulationModel":
        """The model fitted to the one-month Azure trace."""
        return cls(
            lambda_prior=GammaParams(0.4907, 0.4496),
            sigma_prior=GammaParams(0.2616, 0.0552),
            mu_prior=GammaParams(0.3107, 0.5778),
            delta=0.119,
            nu=0.673,
        )

    def to_dict(self) -> dict:
        return {
            "lambda_prior": self.lambda_prior.to_dict(),
            "sigma_prior": self.sigma_prior.to_dict(),
            "mu_prior": self.mu_prior.to_dict(),
            "delta": float(self.delta),
            "nu": float(self.nu),
            "initial_size_mode": self.initial_size_mode,
        }


@dataclass(frozen=True)
class DeploymentParams:
    """The hidden parameters driving one deployment's processes."""

    lambda_norm: float
    sigma: float
    mu: float

    def __post_init__(self) -> None:
        if not self.lambda_norm > 0:
            raise ValueError(f"lambda_norm must be > 0, got {self.lambda_norm}")
        if not self.mu > 0:
            raise ValueError(f"mu must be > 0, got {self.mu}")
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")

    def scaleout_rate(self, nu: float) -> float:
        """Effective scale-out rate per hour, lambda_norm * mu**nu."""
        return self.lambda_norm * self.mu ** nu

    def shutdown_rate(self, delta: float) -> float:
        return delta * self.mu


class ProcessKind(str, Enum):
    SCALEOUT = "scaleout"
    CORE_DEATH = "core_death"
    SHUTDOWN = "shutdown"


def sample_deployment_params(model: PopulationModel, rng: np.random.Generator) -> DeploymentParams:
    """Draw (Lambda, Sigma, M) independently from the population priors."""
    lam = max(float(model.lambda_prior.sample(rng)), _TINY)
    sigma = float(model.sigma_prior.sample(rng))
    mu = max(float(model.mu_prior.sample(rng)), _TINY)
    return DeploymentParams(lambda_norm=lam, sigma=sigma, mu=mu)


def sample_event_time(
    params: DeploymentParams,
    kind: ProcessKind | str,
    rng: np.random.Generator,
    *,
    nu: float,
    delta: float,
) -> float:
    """Waiting time in hours until the next event of the given process.

    Returns ``math.inf`` for a process with rate zero (delta == 0 shutdown clock).
    """
    kind = ProcessKind(kind)
    if kind is ProcessKind.SCALEOUT:
        rate = params.scaleout_rate(nu)
    elif kind is ProcessKind.CORE_DEATH:
        rate = params.mu
    else:
        rate = params.shutdown_rate(delta)

    if rate <= 0:
        return math.inf
    if math.isinf(rate):
        return 0.0
    return float(rng.exponential(1.0 / rate))


def sample_scaleout_size(params: DeploymentParams, rng: np.random.Generator) -> int:
    """One requested core plus Poisson(sigma) extra cores."""
    return 1 + int(rng.poisson(params.sigma))


def sample_initial_size(model: PopulationModel, params: DeploymentParams, rng: np.random.Generator) -> int:
    if model.initial_size_mode == "single":
        return 1
    return sample_scaleout_size(params, rng)
