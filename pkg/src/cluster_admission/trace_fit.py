"""Fit a PopulationModel to a workload trace.

Two methods share the trace reader and the per-deployment observations:

marginal (default): every deployment, censored or not, enters the conjugate marginal
likelihood of each Gamma prior. The core death prior is fitted jointly with the shutdown
multiplier Delta, then the scale-out prior jointly with the exponent nu.

point: per-deployment censored maximum likelihood with the P1/P2 imputation constants,
then Gamma MLE over the point estimates. calibrate_P1_P2 picks P1/P2 by the Cramer-von
Mises distance between synthetic and observed deployment sizes.

Trace CSV columns: ``deployment_id,event,time_hours,cores``.
"""
from __future__ import annotations

import csv
import heapq
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Iterable, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.optimize import minimize, minimize_scalar
from scipy.special import digamma, gammaincinv, gammaln, logsumexp, polygamma

from .errors import DegenerateSampleError, TraceFormatError
from .population import (
    DeploymentParams,
    GammaParams,
    PopulationModel,
    ProcessKind,
    sample_deployment_params,
    sample_event_time,
    sample_initial_size,
    sample_scaleout_size,
)

logger = logging.getLogger(__name__)

EventKind = Literal["deploy", "scaleout", "core_stop", "end_of_trace"]
_EVENT_KINDS = ("deploy", "scaleout", "core_stop", "end_of_trace")
TRACE_HEADER = ["deployment_id", "event", "time_hours", "cores"]


@dataclass(frozen=True)
class TraceEvent:
    deployment_id: str
    event: EventKind
    time: float
    cores: int = 1


SizeStatistic = Literal["peak", "final", "total"]
FitMethod = Literal["marginal", "point"]


class FitConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    # marginal: Gamma priors by their conjugate marginal likelihood over all deployments.
    # point: per-deployment estimates with P1/P2 imputation, then Gamma MLE.
    method: FitMethod = "marginal"
    P1: float = Field(0.5, gt=0, lt=1)
    P2: float = Field(0.5, gt=0, lt=1)
    trace_length: float = Field(gt=0)
    # A stop that empties a deployment of at least this many cores at once is a shutdown.
    # Use 3 for traces whose timestamps are coarse enough for core deaths to coincide.
    shutdown_min_cores: int = Field(2, ge=1)
    include_initial_size: bool = True
    # Deployments deployed at or before this time were already running when the trace began.
    trace_start: float = 0.0
    include_pre_trace: bool = False
    # Deployment size compared by the Cramer-von Mises distance.
    size_statistic: SizeStatistic = "peak"
    nu_scale: Literal["log", "linear"] = "linear"
    nu_bounds: tuple[float, float] = (-2.0, 2.0)
    # Posterior quantiles of the core death rate per deployment in the marginal scale-out fit.
    quadrature_nodes: int = Field(32, ge=4, le=512)
    seed: int = 0

    @field_validator("nu_bounds")
    @classmethod
    def _ordered(cls, value: tuple[float, float]) -> tuple[float, float]:
        if not value[0] < value[1]:
            raise ValueError("nu_bounds must be (lower, upper) with lower < upper")
        return value


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def read_trace_csv(path: Path | str) -> list[TraceEvent]:
    """Parse and validate a trace; returns events ordered by time (stable)."""
    path = Path(path)
    events: list[TraceEvent] = []
    deployed: set[str] = set()
    with path.open("r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise TraceFormatError("trace is empty", line=1)
        if [h.strip() for h in header] != TRACE_HEADER:
            raise TraceFormatError(f"expected header {','.join(TRACE_HEADER)}", line=1)

        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 4:
                raise TraceFormatError(f"expected 4 columns, got {len(row)}", line=lineno)
            dep_id, kind, time_text, cores_text = (cell.strip() for cell in row)
            if not dep_id:
                raise TraceFormatError("empty deployment_id", line=lineno)
            if kind not in _EVENT_KINDS:
                raise TraceFormatError(f"unknown event '{kind}'", line=lineno)
            try:
                time = float(time_text)
            except ValueError:
                raise TraceFormatError(f"invalid time_hours '{time_text}'", line=lineno) from None
            if not math.isfinite(time) or time < 0:
                raise TraceFormatError(f"time_hours must be finite and >= 0, got {time_text}", line=lineno)
            if cores_text:
                try:
                    cores = int(cores_text)
                except ValueError:
                    raise TraceFormatError(f"invalid cores '{cores_text}'", line=lineno) from None
            elif kind in ("deploy", "scaleout"):
                raise TraceFormatError(f"{kind} needs a core count", line=lineno)
            else:
                cores = 1
            if cores < 1 and kind != "end_of_trace":
                raise TraceFormatError(f"cores must be >= 1, got {cores}", line=lineno)

            if kind == "deploy":
                if dep_id in deployed:
                    raise TraceFormatError(f"deployment '{dep_id}' deployed twice", line=lineno)
                deployed.add(dep_id)
            elif dep_id not in deployed:
                raise TraceFormatError(f"'{kind}' for deployment '{dep_id}' before its deploy", line=lineno)
            events.append(TraceEvent(dep_id, kind, time, cores))  # type: ignore[arg-type]

    if not events:
        raise TraceFormatError("trace has no events", line=2)
    events.sort(key=lambda e: e.time)
    return events


def write_trace_csv(events: Iterable[TraceEvent], path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRACE_HEADER)
        for e in events:
            writer.writerow([e.deployment_id, e.event, repr(float(e.time)), e.cores])
    return path


def group_by_deployment(events: Iterable[TraceEvent]) -> dict[str, list[TraceEvent]]:
    groups: dict[str, list[TraceEvent]] = defaultdict(list)
    for e in events:
        groups[e.deployment_id].append(e)
    return dict(groups)


# ---------------------------------------------------------------------------
# Synthetic traces
# ---------------------------------------------------------------------------


def simulate_deployment_events(
    params: DeploymentParams,
    model: PopulationModel,
    start: float,
    end: float,
    rng: np.random.Generator,
    deployment_id: str,
) -> list[TraceEvent]:
    """One deployment on an unbounded cluster, observed over [start, end]."""
    size = sample_initial_size(model, params, rng)
    events = [TraceEvent(deployment_id, "deploy", start, size)]
    deaths = list(start + rng.exponential(1.0 / params.mu, size=size))
    heapq.heapify(deaths)
    live = size
    shutdown_at = start + sample_event_time(params, ProcessKind.SHUTDOWN, rng, nu=model.nu, delta=model.delta)
    next_scaleout = start + sample_event_time(params, ProcessKind.SCALEOUT, rng, nu=model.nu, delta=model.delta)

    while True:
        next_death = deaths[0] if deaths else math.inf
        t = min(next_death, shutdown_at, next_scaleout)
        if t > end:
            break
        if t == shutdown_at:
            events.append(TraceEvent(deployment_id, "core_stop", float(t), live))
            live = 0
            break
        if t == next_death:
            heapq.heappop(deaths)
            events.append(TraceEvent(deployment_id, "core_stop", float(t), 1))
            live -= 1
            if live == 0:
                break
        else:
            extra = sample_scaleout_size(params, rng)
            events.append(TraceEvent(deployment_id, "scaleout", float(t), extra))
            for d in t + rng.exponential(1.0 / params.mu, size=extra):
                heapq.heappush(deaths, float(d))
            live += extra
            next_scaleout = t + sample_event_time(params, ProcessKind.SCALEOUT, rng, nu=model.nu, delta=model.delta)

    if live > 0:
        events.append(TraceEvent(deployment_id, "end_of_trace", float(end), live))
    return events


def generate_trace(
    model: PopulationModel,
    arrival_rate: float,
    trace_length: float,
    rng: np.random.Generator,
) -> list[TraceEvent]:
    """Poisson arrivals over [0, trace_length], each deployment simulated in isolation."""
    if arrival_rate <= 0:
        raise ValueError(f"arrival_rate must be > 0, got {arrival_rate}")
    if trace_length <= 0:
        raise ValueError(f"trace_length must be > 0, got {trace_length}")

    events: list[TraceEvent] = []
    t = float(rng.exponential(1.0 / arrival_rate))
    n = 0
    while t <= trace_length:
        params = sample_deployment_params(model, rng)
        events.extend(simulate_deployment_events(params, model, t, trace_length, rng, f"d{n:06d}"))
        n += 1
        t += float(rng.exponential(1.0 / arrival_rate))
    events.sort(key=lambda e: e.time)
    logger.info(f"Generated synthetic trace: {n} deployments, {len(events)} events over {trace_length}h")
    return events


# ---------------------------------------------------------------------------
# Deployment level
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeploymentObservation:
    """Sufficient statistics of one deployment's observed history."""

    deployment_id: str
    deploy_time: float
    observed_time: float
    n_scaleouts: int
    sizes: tuple[int, ...]
    core_deaths: int
    core_exposure: float
    shut_down: bool
    peak_size: int
    final_size: int
    total_cores: int
    # The last core stopped alone: a core death or a shutdown, the trace cannot tell.
    ambiguous_end: bool = False

    def size(self, statistic: SizeStatistic) -> int:
        return {"peak": self.peak_size, "final": self.final_size, "total": self.total_cores}[statistic]


@dataclass(frozen=True)
class DeploymentFit:
    deployment_id: str
    scaleout_rate: float
    mean_extra_size: float
    core_death_rate: float
    observed_time: float
    shut_down: bool
    peak_size: int
    scaleout_imputed: bool = False
    size_imputed: bool = False
    death_imputed: bool = False

    @property
    def normalized_lifetime(self) -> float:
        """Observed lifetime in units of the mean core lifetime."""
        return self.observed_time * self.core_death_rate


def observe_deployment(events: Sequence[TraceEvent], cfg: FitConfig) -> DeploymentObservation:
    if not events:
        raise ValueError("no events for deployment")
    events = sorted(events, key=lambda e: e.time)
    first = events[0]
    if first.event != "deploy":
        raise TraceFormatError(f"deployment '{first.deployment_id}' does not start with a deploy event")

    live = first.cores
    peak = total = live
    last = first.time
    exposure = 0.0
    deaths = 0
    n_scaleouts = 0
    sizes = [first.cores] if cfg.include_initial_size else []
    shut_down = False
    ambiguous_end = False
    end: Optional[float] = None

    for e in events[1:]:
        exposure += live * (e.time - last)
        last = e.time
        if e.event == "scaleout":
            live += e.cores
            total += e.cores
            n_scaleouts += 1
            sizes.append(e.cores)
            peak = max(peak, live)
        elif e.event == "core_stop":
            stopped = min(e.cores, live)
            if stopped == live and stopped >= cfg.shutdown_min_cores:
                shut_down = True
            else:
                deaths += stopped
                ambiguous_end = stopped == live == 1
            live -= stopped
            if live == 0:
                end = e.time
                break
        elif e.event == "end_of_trace":
            end = e.time
            break
        else:
            raise TraceFormatError(f"deployment '{first.deployment_id}' deployed twice")

    if end is None:
        exposure += live * max(cfg.trace_length - last, 0.0)
        end = max(cfg.trace_length, last)

    return DeploymentObservation(
        deployment_id=first.deployment_id,
        deploy_time=first.time,
        observed_time=end - first.time,
        n_scaleouts=n_scaleouts,
        sizes=tuple(sizes),
        core_deaths=deaths,
        core_exposure=exposure,
        shut_down=shut_down,
        peak_size=peak,
        final_size=live,
        total_cores=total,
        ambiguous_end=ambiguous_end,
    )


def fit_observation(obs: DeploymentObservation, P1: float, P2: float) -> DeploymentFit:
    if obs.observed_time <= 0 or obs.core_exposure <= 0:
        raise DegenerateSampleError(f"deployment '{obs.deployment_id}' has no observed lifetime")

    # Rate at which seeing nothing over the observed window has probability P1.
    no_event_rate = -math.log(P1)

    scaleout_imputed = obs.n_scaleouts == 0
    scaleout_rate = (no_event_rate if scaleout_imputed else obs.n_scaleouts) / obs.observed_time

    extras = [s - 1 for s in obs.sizes]
    size_imputed = sum(extras) == 0
    if size_imputed:
        # Poisson(sigma) with P(no extra core in k observed sizes) = P2.
        mean_extra = -math.log(P2) / max(len(extras), 1)
    else:
        mean_extra = float(np.mean(extras))

    death_imputed = obs.core_deaths == 0
    death_rate = (no_event_rate if death_imputed else obs.core_deaths) / obs.core_exposure

    return DeploymentFit(
        deployment_id=obs.deployment_id,
        scaleout_rate=scaleout_rate,
        mean_extra_size=mean_extra,
        core_death_rate=death_rate,
        observed_time=obs.observed_time,
        shut_down=obs.shut_down,
        peak_size=obs.peak_size,
        scaleout_imputed=scaleout_imputed,
        size_imputed=size_imputed,
        death_imputed=death_imputed,
    )


def fit_deployment(events: Sequence[TraceEvent], cfg: FitConfig) -> DeploymentFit:
    """Censored maximum likelihood fit of one deployment's processes."""
    if not events:
        raise ValueError("empty event list")
    return fit_observation(observe_deployment(events, cfg), cfg.P1, cfg.P2)


# ---------------------------------------------------------------------------
# Population level
# ---------------------------------------------------------------------------


def fit_gamma_mle(samples: Sequence[float] | np.ndarray, *, tol: float = 1e-10, max_iter: int = 100) -> GammaParams:
    """Gamma maximum likelihood: Newton on log(k) - digamma(k) = log(mean) - mean(log x)."""
    x = np.asarray(samples, dtype=float)
    if x.shape[0] < 2:
        raise DegenerateSampleError("need at least two samples for a Gamma fit")
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise ValueError("Gamma samples must be positive and finite")
    mean = float(x.mean())
    s = math.log(mean) - float(np.log(x).mean())
    if s <= 1e-12:
        raise DegenerateSampleError("all samples are equal; Gamma fit is degenerate")

    var = float(x.var())
    k = mean * mean / var if var > 0 else 1.0
    for _ in range(max_iter):
        f = math.log(k) - float(digamma(k)) - s
        f_prime = 1.0 / k - float(polygamma(1, k))
        step = f / f_prime
        k_new = k - step
        if k_new <= 0:
            k_new = k / 2.0
        if abs(k_new - k) <= tol * max(1.0, k):
            k = k_new
            break
        k = k_new
    else:
        logger.warning(f"Gamma MLE did not converge after {max_iter} iterations (shape={k:.6g})")
    return GammaParams(shape=k, rate=k / mean)


def _nu_objective(nu: float, log_rates: np.ndarray, log_mu: np.ndarray, scale: str) -> float:
    log_norm = log_rates - nu * log_mu
    if scale == "log":
        return float(np.abs(log_norm - log_norm.mean()).mean())
    # Mean absolute distance to the average normalized rate, in units of that average.
    norm = np.exp(log_norm - log_norm.max())
    mean = norm.mean()
    return float(np.abs(norm - mean).mean() / mean)


def fit_nu(
    fits: Sequence[DeploymentFit],
    *,
    scale: Literal["log", "linear"] = "linear",
    bounds: tuple[float, float] = (-2.0, 2.0),
) -> float:
    """Exponent minimizing the mean absolute distance of normalized scale-out rates to their mean."""
    usable = [f for f in fits if not (f.scaleout_imputed or f.death_imputed)]
    midpoint = 0.5 * (bounds[0] + bounds[1])
    if len(usable) < 2:
        logger.warning(f"nu fit needs two deployments with observed rates, got {len(usable)}; using {midpoint}")
        return midpoint

    log_rates = np.log([f.scaleout_rate for f in usable])
    log_mu = np.log([f.core_death_rate for f in usable])
    res = minimize_scalar(
        _nu_objective,
        bounds=bounds,
        args=(log_rates, log_mu, scale),
        method="bounded",
        options={"xatol": 1e-6},
    )
    logger.info(f"Fitted nu={res.x:.4f} over {len(usable)} deployments ({scale} scale)")
    return float(res.x)


def fit_delta(normalized_lifetimes: Sequence[float], shutdown_flags: Sequence[bool]) -> float:
    """Censored exponential MLE of shutdowns per core lifetime; non-shutdowns are censored."""
    lifetimes = np.asarray(normalized_lifetimes, dtype=float)
    flags = np.asarray(shutdown_flags, dtype=bool)
    if lifetimes.shape != flags.shape:
        raise ValueError("lifetimes and flags must have the same length")
    shutdowns = int(flags.sum())
    if shutdowns == 0:
        logger.warning("No shutdowns observed; Delta is only bounded from below, using 0")
        return 0.0
    total = float(lifetimes.sum())
    if total <= 0:
        raise DegenerateSampleError("total normalized lifetime is zero")
    return shutdowns / total


def fit_population(
    fits: Sequence[DeploymentFit],
    nu: float,
    *,
    delta: float = 0.0,
) -> PopulationModel:
    """Gamma priors over (Lambda, Sigma, M); scale-out rates are normalized by mu**nu first.

    Deployments without an observed core death have no lifetime estimate and are left out of
    the Lambda and M priors.
    """
    if len(fits) < 2:
        raise DegenerateSampleError(f"need at least two deployment fits, got {len(fits)}")
    with_deaths = [f for f in fits if not f.death_imputed]
    if len(with_deaths) < 2:
        raise DegenerateSampleError("fewer than two deployments with an observed core death")

    mu = np.array([f.core_death_rate for f in with_deaths])
    lambda_norm = np.array([f.scaleout_rate for f in with_deaths]) / mu**nu
    sigma = np.array([f.mean_extra_size for f in fits])

    return PopulationModel(
        lambda_prior=fit_gamma_mle(lambda_norm),
        sigma_prior=fit_gamma_mle(sigma),
        mu_prior=fit_gamma_mle(mu),
        delta=delta,
        nu=nu,
    )


# ---------------------------------------------------------------------------
# Marginal likelihood
# ---------------------------------------------------------------------------

# Bounds on log-shape and log-rate during optimization.
_LOG_BOUNDS = (-12.0, 12.0)
_TINY = float(np.finfo(float).tiny)


@dataclass(frozen=True)
class ExposureTable:
    """Counts and exposures of every deployment with a positive observed lifetime."""

    observed_time: np.ndarray
    core_hours: np.ndarray
    core_deaths: np.ndarray
    shutdowns: np.ndarray
    ambiguous_ends: np.ndarray
    scaleouts: np.ndarray
    extra_cores: np.ndarray
    size_samples: np.ndarray

    @classmethod
    def from_observations(cls, observations: Sequence[DeploymentObservation]) -> "ExposureTable":
        usable = [o for o in observations if o.observed_time > 0 and o.core_exposure > 0]
        return cls(
            observed_time=np.array([o.observed_time for o in usable], dtype=float),
            core_hours=np.array([o.core_exposure for o in usable], dtype=float),
            core_deaths=np.array([o.core_deaths for o in usable], dtype=float),
            shutdowns=np.array([o.shut_down for o in usable], dtype=float),
            ambiguous_ends=np.array([o.ambiguous_end for o in usable], dtype=bool),
            scaleouts=np.array([o.n_scaleouts for o in usable], dtype=float),
            extra_cores=np.array([sum(s - 1 for s in o.sizes) for o in usable], dtype=float),
            size_samples=np.array([len(o.sizes) for o in usable], dtype=float),
        )

    def __len__(self) -> int:
        return int(self.observed_time.shape[0])


def gamma_poisson_loglik(shape: float, rate: float, counts: np.ndarray, exposure: np.ndarray) -> np.ndarray:
    """log P(counts) for Poisson(theta * exposure) counts with theta ~ Gamma(shape, rate).

    Terms that do not depend on the prior are dropped.
    """
    return (
        gammaln(shape + counts)
        - gammaln(shape)
        + shape * math.log(rate)
        - (shape + counts) * np.log(rate + exposure)
    )


def _maximize(
    loglik: Callable[[np.ndarray], float],
    x0: Sequence[float],
    bounds: Sequence[tuple[float, float]],
    what: str,
) -> np.ndarray:
    res = minimize(lambda x: -loglik(x), np.asarray(x0, dtype=float), method="L-BFGS-B", bounds=bounds)
    if not res.success:
        logger.warning(f"{what} fit stopped early: {res.message}")
    for value, (lo, hi) in zip(res.x, bounds):
        if value <= lo + 1e-6 or value >= hi - 1e-6:
            logger.warning(f"{what} fit ended on a bound ({value:.4g} in [{lo:g}, {hi:g}])")
    return res.x


def fit_sigma_prior(table: ExposureTable) -> GammaParams:
    """Gamma prior of the mean extra scale-out size.

    Extra cores summed over a deployment's observed sizes are Poisson(Sigma * sizes).
    """
    keep = table.size_samples > 0
    extras, samples = table.extra_cores[keep], table.size_samples[keep]
    if extras.sum() <= 0:
        raise DegenerateSampleError("no scale-out with extra cores in the trace")
    mean = float(extras.sum() / samples.sum())

    def loglik(x: np.ndarray) -> float:
        return float(gamma_poisson_loglik(math.exp(x[0]), math.exp(x[1]), extras, samples).mean())

    x = _maximize(loglik, [0.0, -math.log(mean)], [_LOG_BOUNDS] * 2, "scale-out size prior")
    return GammaParams(shape=math.exp(x[0]), rate=math.exp(x[1]))


def fit_lifetime_prior(table: ExposureTable) -> tuple[GammaParams, float]:
    """Gamma prior of the core death rate M, jointly with the shutdown multiplier Delta.

    Core deaths plus shutdowns are Poisson(M * (core hours + Delta * observed time)). A last
    core stopping alone is counted as a death and adds a factor (1 + Delta), the odds that it
    was a shutdown instead.
    """
    if len(table) < 2:
        raise DegenerateSampleError(f"need at least two deployments, got {len(table)}")
    if table.core_deaths.sum() <= 0:
        raise DegenerateSampleError("no core death in the trace")
    events = table.core_deaths + table.shutdowns
    n_shutdowns = float(table.shutdowns.sum())
    n_ambiguous = float(table.ambiguous_ends.sum())
    n = len(table)
    mean = float(events.sum() / table.core_hours.sum())

    def loglik(shape: float, rate: float, delta: float) -> float:
        exposure = table.core_hours + delta * table.observed_time
        total = float(gamma_poisson_loglik(shape, rate, events, exposure).sum())
        return (total + n_ambiguous * math.log1p(delta)) / n

    if n_shutdowns == 0:
        logger.warning("No shutdowns observed; Delta is only bounded from below, using 0")
        x = _maximize(
            lambda x: loglik(math.exp(x[0]), math.exp(x[1]), 0.0),
            [0.0, -math.log(mean)],
            [_LOG_BOUNDS] * 2,
            "core lifetime prior",
        )
        return GammaParams(shape=math.exp(x[0]), rate=math.exp(x[1])), 0.0

    delta0 = n_shutdowns / (mean * float(table.observed_time.sum()))
    x = _maximize(
        lambda x: loglik(math.exp(x[0]), math.exp(x[1]), math.exp(x[2])) + n_shutdowns * x[2] / n,
        [0.0, -math.log(mean), math.log(delta0)],
        [_LOG_BOUNDS] * 3,
        "core lifetime prior",
    )
    return GammaParams(shape=math.exp(x[0]), rate=math.exp(x[1])), math.exp(x[2])


def posterior_log_rates(table: ExposureTable, mu_prior: GammaParams, delta: float, nodes: int) -> np.ndarray:
    """log M at equally likely quantiles of each deployment's posterior; shape (deployments, nodes)."""
    shape = mu_prior.shape + table.core_deaths + table.shutdowns
    rate = mu_prior.rate + table.core_hours + delta * table.observed_time
    probs = (np.arange(nodes) + 0.5) / nodes
    quantiles = gammaincinv(shape[:, None], probs[None, :])
    return np.log(np.maximum(quantiles, _TINY)) - np.log(rate)[:, None]


def fit_scaleout_prior(
    table: ExposureTable,
    mu_prior: GammaParams,
    delta: float,
    *,
    bounds: tuple[float, float] = (-2.0, 2.0),
    nodes: int = 32,
) -> tuple[GammaParams, float]:
    """Gamma prior of the normalized scale-out rate Lambda, jointly with the exponent nu.

    Scale-outs are Poisson(Lambda * M**nu * observed time). Lambda integrates out in closed
    form and M is averaged over its posterior given the deployment's deaths and shutdowns.
    """
    if table.scaleouts.sum() <= 0:
        raise DegenerateSampleError("no scale-out in the trace")
    lower = max(bounds[0], -mu_prior.shape / 2.0 + 1e-3)
    if lower >= bounds[1]:
        raise DegenerateSampleError(f"nu bounds {bounds} leave no room above {lower:.4g} for mu shape {mu_prior.shape:.4g}")

    log_mu = posterior_log_rates(table, mu_prior, delta, nodes)
    log_time = np.log(table.observed_time)[:, None]
    counts = table.scaleouts
    log_nodes = math.log(nodes)
    n = len(table)

    def loglik(x: np.ndarray) -> float:
        shape, rate, nu = math.exp(x[0]), math.exp(x[1]), float(x[2])
        scaled = nu * log_mu
        inner = counts[:, None] * scaled - (shape + counts)[:, None] * np.logaddexp(math.log(rate), log_time + scaled)
        mixed = logsumexp(inner, axis=1) - log_nodes
        total = gammaln(shape + counts) - gammaln(shape) + shape * math.log(rate) + mixed
        return float(total.sum()) / n

    nu0 = min(max(0.0, lower), bounds[1])
    mean_power = np.exp(logsumexp(nu0 * log_mu, axis=1) - log_nodes)
    mean0 = float(counts.sum() / (table.observed_time * mean_power).sum())
    x = _maximize(
        loglik,
        [0.0, -math.log(mean0), nu0],
        [_LOG_BOUNDS, _LOG_BOUNDS, (lower, bounds[1])],
        "scale-out rate prior",
    )
    logger.info(f"Fitted nu={x[2]:.4f} over {n} deployments (marginal likelihood)")
    return GammaParams(shape=math.exp(x[0]), rate=math.exp(x[1])), float(x[2])


def fit_marginal(observations: Sequence[DeploymentObservation], cfg: FitConfig) -> PopulationModel:
    """Population model from every deployment, censored or not, with no imputation."""
    table = ExposureTable.from_observations(observations)
    mu_prior, delta = fit_lifetime_prior(table)
    lambda_prior, nu = fit_scaleout_prior(
        table, mu_prior, delta, bounds=cfg.nu_bounds, nodes=cfg.quadrature_nodes
    )
    return PopulationModel(
        lambda_prior=lambda_prior,
        sigma_prior=fit_sigma_prior(table),
        mu_prior=mu_prior,
        delta=delta,
        nu=nu,
    )


# ---------------------------------------------------------------------------
# Size distribution distance and P1/P2 calibration
# ---------------------------------------------------------------------------


def size_cdfs(
    sample_a: Sequence[float] | np.ndarray,
    sample_b: Sequence[float] | np.ndarray,
    *,
    weighted: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pooled support and the two empirical CDFs on it.

    With ``weighted`` every value counts in proportion to itself, giving the share of cores
    held by deployments up to each size.
    """
    a = np.sort(np.asarray(sample_a, dtype=float))
    b = np.sort(np.asarray(sample_b, dtype=float))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("both samples must be non-empty")
    support = np.unique(np.concatenate([a, b]))
    if not weighted:
        F_a = np.searchsorted(a, support, side="right") / a.shape[0]
        F_b = np.searchsorted(b, support, side="right") / b.shape[0]
        return support, F_a, F_b
    if a.sum() <= 0 or b.sum() <= 0:
        raise ValueError("weighted CDFs need positive totals")
    cum_a, cum_b = np.cumsum(a), np.cumsum(b)
    idx_a = np.searchsorted(a, support, side="right")
    idx_b = np.searchsorted(b, support, side="right")
    F_a = np.where(idx_a > 0, cum_a[np.maximum(idx_a - 1, 0)], 0.0) / cum_a[-1]
    F_b = np.where(idx_b > 0, cum_b[np.maximum(idx_b - 1, 0)], 0.0) / cum_b[-1]
    return support, F_a, F_b


def cramer_von_mises(sample_a: Sequence[float] | np.ndarray, sample_b: Sequence[float] | np.ndarray) -> float:
    """Discrete Cramer-von Mises distance: sum over the pooled support of (F_a - F_b)^2 dH."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    _, F_a, F_b = size_cdfs(a, b)
    _, counts = np.unique(np.concatenate([a, b]), return_counts=True)
    weights = counts / counts.sum()
    return float(np.sum((F_a - F_b) ** 2 * weights))


def synthetic_sizes(
    model: PopulationModel,
    windows: Sequence[tuple[float, float]],
    rng: np.random.Generator,
    *,
    statistic: SizeStatistic = "peak",
) -> np.ndarray:
    """Size of one synthetic deployment per observation window (start, end).

    peak: most cores held at once.
    final: cores still live when observation stops.
    total: every core ever deployed.
    """
    sizes = np.empty(len(windows), dtype=int)
    for idx, (start, end) in enumerate(windows):
        params = sample_deployment_params(model, rng)
        live = peak = total = 0
        for e in simulate_deployment_events(params, model, start, end, rng, "synthetic"):
            if e.event in ("deploy", "scaleout"):
                live += e.cores
                total += e.cores
                peak = max(peak, live)
            elif e.event == "core_stop":
                live -= e.cores
        sizes[idx] = {"peak": peak, "final": live, "total": total}[statistic]
    return sizes


@dataclass
class FitReport:
    method: str
    P1: float
    P2: float
    n_deployments: int
    n_pre_trace: int
    n_fitted: int
    n_skipped: int
    no_scaleouts: int
    no_extra_cores: int
    no_core_deaths: int
    shutdowns: int
    ambiguous_ends: int
    nu: float
    delta: float
    lambda_prior: dict[str, float]
    sigma_prior: dict[str, float]
    mu_prior: dict[str, float]
    cvm_distance: Optional[float] = None
    calibration: list[dict[str, float]] = field(default_factory=list)
    # Observed and synthetic sizes behind cvm_distance; not part of the record.
    size_samples: Optional[tuple[np.ndarray, np.ndarray]] = field(default=None, repr=False)

    def to_record(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "size_samples"}

    def size_cdf_rows(self) -> list[tuple[float, float, float, float, float]]:
        """(size, empirical CDF, synthetic CDF, empirical core share, synthetic core share) rows."""
        if self.size_samples is None:
            raise ValueError("report carries no size samples")
        observed, synthetic = self.size_samples
        support, F_obs, F_syn = size_cdfs(observed, synthetic)
        _, W_obs, W_syn = size_cdfs(observed, synthetic, weighted=True)
        return [
            (float(s), float(f_o), float(f_s), float(w_o), float(w_s))
            for s, f_o, f_s, w_o, w_s in zip(support, F_obs, F_syn, W_obs, W_syn)
        ]


def _fit_point(observations: Sequence[DeploymentObservation], cfg: FitConfig) -> PopulationModel:
    fits = [fit_observation(obs, cfg.P1, cfg.P2) for obs in observations]
    nu = fit_nu(fits, scale=cfg.nu_scale, bounds=cfg.nu_bounds)
    delta = fit_delta([f.normalized_lifetime for f in fits], [f.shut_down for f in fits])
    return fit_population(fits, nu, delta=delta)


def _fit_observations(
    observations: Sequence[DeploymentObservation], cfg: FitConfig, *, n_pre_trace: int = 0
) -> tuple[PopulationModel, FitReport]:
    usable = [o for o in observations if o.observed_time > 0 and o.core_exposure > 0]
    skipped = len(observations) - len(usable)
    if skipped:
        logger.warning(f"Skipped {skipped} deployment(s) with zero observed lifetime")

    model = fit_marginal(usable, cfg) if cfg.method == "marginal" else _fit_point(usable, cfg)

    report = FitReport(
        method=cfg.method,
        P1=cfg.P1,
        P2=cfg.P2,
        n_deployments=len(observations) + n_pre_trace,
        n_pre_trace=n_pre_trace,
        n_fitted=len(usable),
        n_skipped=skipped,
        no_scaleouts=sum(o.n_scaleouts == 0 for o in usable),
        no_extra_cores=sum(all(s == 1 for s in o.sizes) for o in usable),
        no_core_deaths=sum(o.core_deaths == 0 for o in usable),
        shutdowns=sum(o.shut_down for o in usable),
        ambiguous_ends=sum(o.ambiguous_end for o in usable),
        nu=model.nu,
        delta=model.delta,
        lambda_prior=model.lambda_prior.to_dict(),
        sigma_prior=model.sigma_prior.to_dict(),
        mu_prior=model.mu_prior.to_dict(),
    )
    return model, report


def _size_samples(
    model: PopulationModel,
    observations: Sequence[DeploymentObservation],
    cfg: FitConfig,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    windows = [(o.deploy_time, max(cfg.trace_length, o.deploy_time)) for o in observations]
    synthetic = synthetic_sizes(model, windows, np.random.default_rng(seed), statistic=cfg.size_statistic)
    observed = np.array([o.size(cfg.size_statistic) for o in observations], dtype=int)
    return observed, synthetic


def _observe_all(events: Sequence[TraceEvent], cfg: FitConfig) -> tuple[list[DeploymentObservation], int]:
    """Observations of every deployment, minus those already running at the trace start unless kept."""
    if not events:
        raise TraceFormatError("trace has no events")
    observations = [observe_deployment(evts, cfg) for evts in group_by_deployment(events).values()]
    if cfg.include_pre_trace:
        return observations, 0
    kept = [o for o in observations if o.deploy_time > cfg.trace_start]
    n_pre_trace = len(observations) - len(kept)
    if n_pre_trace:
        logger.info(f"Excluded {n_pre_trace} deployment(s) already running at t={cfg.trace_start:g}h")
    return kept, n_pre_trace


def fit_trace(events: Sequence[TraceEvent], cfg: FitConfig) -> tuple[PopulationModel, FitReport]:
    """Full pipeline for the configured method; the report carries the size-CDF distance of the fit."""
    observations, n_pre_trace = _observe_all(events, cfg)
    model, report = _fit_observations(observations, cfg, n_pre_trace=n_pre_trace)
    report.size_samples = _size_samples(model, observations, cfg, cfg.seed)
    report.cvm_distance = cramer_von_mises(*report.size_samples)
    logger.info(
        f"Fitted {report.n_fitted} deployments ({cfg.method}): nu={report.nu:.4f} delta={report.delta:.4f} "
        f"CvM distance={report.cvm_distance:.4f}"
    )
    return model, report


def calibrate_P1_P2(
    events: Sequence[TraceEvent],
    cfg: FitConfig,
    p1_grid: Sequence[float],
    p2_grid: Sequence[float],
) -> tuple[PopulationModel, FitReport]:
    """Grid search over (P1, P2) minimizing the size Cramer-von Mises distance.

    P1 and P2 only act in the point method, so every candidate is fitted with it, and scored
    with the same synthetic seed.
    """
    if not p1_grid or not p2_grid:
        raise ValueError("P1 and P2 grids must be non-empty")
    observations, n_pre_trace = _observe_all(events, cfg)

    best: Optional[tuple[float, PopulationModel, FitReport]] = None
    table: list[dict[str, float]] = []
    for p1 in p1_grid:
        for p2 in p2_grid:
            candidate_cfg = FitConfig.model_validate(
                {**cfg.model_dump(), "P1": float(p1), "P2": float(p2), "method": "point"}
            )
            model, report = _fit_observations(observations, candidate_cfg, n_pre_trace=n_pre_trace)
            report.size_samples = _size_samples(model, observations, candidate_cfg, cfg.seed)
            distance = cramer_von_mises(*report.size_samples)
            report.cvm_distance = distance
            table.append({"P1": float(p1), "P2": float(p2), "cvm_distance": distance})
            logger.info(f"P1={p1:g} P2={p2:g}: CvM distance {distance:.4f}")
            if best is None or distance < best[0]:
                best = (distance, model, report)

    assert best is not None
    _, model, report = best
    report.calibration = table
    logger.info(f"Best P1={report.P1:g} P2={report.P2:g} with distance {report.cvm_distance:.4f}")
    return model, report
