"""Per-deployment belief state: Gamma posteriors over (Lambda, Sigma, M) with conjugate updates."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Any, Mapping

import numpy as np

from .population import DeploymentParams, GammaParams, PopulationModel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InfoLevel:
    """Number of pseudo observations per process handed over with an arriving deployment."""

    pseudo_observations: int = 0

    def __post_init__(self) -> None:
        if self.pseudo_observations < 0:
            raise ValueError(f"pseudo_observations must be >= 0, got {self.pseudo_observations}")


@dataclass(frozen=True)
class BeliefState:
    lambda_post: GammaParams
    sigma_post: GammaParams
    mu_post: GammaParams
    n_scaleouts: int = 0
    extra_cores_observed: int = 0
    n_core_deaths: int = 0
    total_core_exposure: float = 0.0
    deployment_age: float = 0.0
    # Population constants carried along so moment evaluation needs only the belief.
    nu: float = 0.0
    delta: float = 0.0

    @classmethod
    def from_population(cls, model: PopulationModel) -> "BeliefState":
        return cls(
            lambda_post=model.lambda_prior,
            sigma_post=model.sigma_prior,
            mu_post=model.mu_prior,
            nu=model.nu,
            delta=model.delta,
        )

    @property
    def mu_mean_pow_nu(self) -> float:
        """Plug-in normalization E[M]^nu for the scale-out exposure."""
        return self.mu_post.mean ** self.nu


def init_belief(
    model: PopulationModel,
    info: InfoLevel,
    true_params: DeploymentParams,
    rng: np.random.Generator,
) -> BeliefState:
    """Population prior sharpened by ``info.pseudo_observations`` samples of each true process.

    Lifetimes are applied first so the scale-out normalization uses the sharpened M posterior.
    """
    belief = BeliefState.from_population(model)
    k = info.pseudo_observations
    if k == 0:
        return belief

    lifetimes = rng.exponential(1.0 / true_params.mu, size=k)
    waits = rng.exponential(1.0 / true_params.scaleout_rate(model.nu), size=k)
    sizes = 1 + rng.poisson(true_params.sigma, size=k)

    for lifetime in lifetimes:
        belief = update_on_core_death(belief, float(lifetime))
    for wait, size in zip(waits, sizes):
        belief = update_on_scaleout(belief, int(size), float(wait))
    return belief


def update_on_core_death(b: BeliefState, lifetime: float) -> BeliefState:
    """Exponential-Gamma update for one observed core lifetime (hours)."""
    if lifetime < 0:
        raise ValueError(f"lifetime must be >= 0, got {lifetime}")
    return replace(
        b,
        mu_post=GammaParams(b.mu_post.shape + 1.0, b.mu_post.rate + lifetime),
        n_core_deaths=b.n_core_deaths + 1,
        total_core_exposure=b.total_core_exposure + lifetime,
    )


def update_on_exposure(
    b: BeliefState,
    elapsed: float,
    live_cores: int,
    *,
    track_scaleouts: bool = True,
) -> BeliefState:
    """Censored-observation bookkeeping for ``elapsed`` hours with ``live_cores`` alive.

    Live cores add exposure to the M posterior rate without a death. With ``track_scaleouts``
    the elapsed time also counts as scale-out exposure (no scale-out happened in it).
    """
    if elapsed < 0:
        raise ValueError(f"elapsed must be >= 0, got {elapsed}")
    if live_cores < 0:
        raise ValueError(f"live_cores must be >= 0, got {live_cores}")
    if elapsed == 0:
        return b

    lambda_post = b.lambda_post
    if track_scaleouts:
        lambda_post = GammaParams(lambda_post.shape, lambda_post.rate + elapsed * b.mu_mean_pow_nu)

    core_time = elapsed * live_cores
    return replace(
        b,
        lambda_post=lambda_post,
        mu_post=GammaParams(b.mu_post.shape, b.mu_post.rate + core_time),
        total_core_exposure=b.total_core_exposure + core_time,
        deployment_age=b.deployment_age + elapsed,
    )


def update_on_scaleout(b: BeliefState, size: int, elapsed_since_last: float) -> BeliefState:
    """Poisson-process update of Lambda and Poisson-Gamma update of Sigma for one scale-out."""
    if size < 1:
        raise ValueError(f"scale-out size must be >= 1, got {size}")
    if elapsed_since_last < 0:
        raise ValueError(f"elapsed_since_last must be >= 0, got {elapsed_since_last}")

    extra = size - 1
    return replace(
        b,
        lambda_post=GammaParams(
            b.lambda_post.shape + 1.0,
            b.lambda_post.rate + elapsed_since_last * b.mu_mean_pow_nu,
        ),
        sigma_post=GammaParams(b.sigma_post.shape + extra, b.sigma_post.rate + 1.0),
        n_scaleouts=b.n_scaleouts + 1,
        extra_cores_observed=b.extra_cores_observed + extra,
    )


def belief_to_record(b: BeliefState) -> dict[str, Any]:
    return {
        "lambda_post": b.lambda_post.to_dict(),
        "sigma_post": b.sigma_post.to_dict(),
        "mu_post": b.mu_post.to_dict(),
        "n_scaleouts": b.n_scaleouts,
        "extra_cores_observed": b.extra_cores_observed,
        "n_core_deaths": b.n_core_deaths,
        "total_core_exposure": float(b.total_core_exposure),
        "deployment_age": float(b.deployment_age),
        "nu": float(b.nu),
        "delta": float(b.delta),
    }


def belief_from_record(record: Mapping[str, Any]) -> BeliefState:
    """Inverse of ``belief_to_record``; raises ValueError on a missing or invalid field."""
    try:
        return BeliefState(
            lambda_post=GammaParams(**record["lambda_post"]),
            sigma_post=GammaParams(**record["sigma_post"]),
            mu_post=GammaParams(**record["mu_post"]),
            n_scaleouts=int(record.get("n_scaleouts", 0)),
            extra_cores_observed=int(record.get("extra_cores_observed", 0)),
            n_core_deaths=int(record.get("n_core_deaths", 0)),
            total_core_exposure=float(record.get("total_core_exposure", 0.0)),
            deployment_age=float(record.get("deployment_age", 0.0)),
            nu=float(record["nu"]),
            delta=float(record["delta"]),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"invalid belief record: {exc!r}") from exc
