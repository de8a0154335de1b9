"""Continuous-time discrete-event simulation of one cluster under an admission policy."""
from __future__ import annotations

import heapq
import logging
import math
import multiprocessing
from dataclasses import dataclass, field
from typing import Any, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .belief import BeliefState, InfoLevel, init_belief, update_on_core_death, update_on_exposure, update_on_scaleout
from .common_utils import config_digest
from .policies import Candidate, PolicyConfig, ProfileCache, decision_record, on_arrival
from .population import (
    DeploymentParams,
    PopulationModel,
    ProcessKind,
    sample_deployment_params,
    sample_event_time,
    sample_initial_size,
    sample_scaleout_size,
)

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.SeedSequence]

# Tie-break order for simultaneous events.
CORE_DEATH, SHUTDOWN, SCALEOUT, ARRIVAL = 0, 1, 2, 3


class SimConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    capacity_c: int = Field(ge=1)
    arrival_rate: float = Field(ge=0)
    horizon: float = Field(gt=0)
    sla_tau: float = Field(0.0001, ge=0, lt=1)
    population: PopulationModel = PopulationModel.fitted_default()
    policy: PolicyConfig
    info_level: int = Field(0, ge=0)
    # Pending exposure of a deployment is folded into its belief at an arrival once it would
    # raise the mu posterior rate by this fraction; its own events always fold it in.
    exposure_refresh: float = Field(0.02, ge=0)
    replications: int = Field(1, ge=1)
    seed: int = 0
    record_decisions: bool = False
    event_log: bool = False

    @model_validator(mode="after")
    def _check_threshold_range(self) -> "SimConfig":
        t = self.policy.threshold_t
        if self.policy.kind == "zeroth" and t is not None and t > self.capacity_c + 1:
            logger.warning(f"zeroth moment threshold {t} exceeds capacity {self.capacity_c}; it admits nothing extra")
        return self

    def with_policy(self, policy: PolicyConfig) -> "SimConfig":
        return self.model_copy(update={"policy": policy})

    def digest(self) -> str:
        return config_digest(self.model_dump(mode="json"))


@dataclass
class SimResult:
    seed_entropy: str
    utilization: float
    denial_rate: float
    deployments_accepted: int
    deployments_rejected: int
    scaleout_requests: int
    scaleouts_denied: int
    failure_events: list[tuple[float, int, int]] = field(default_factory=list)
    events: Optional[list[tuple[float, str, int, int, int]]] = None
    decisions: Optional[list[dict[str, Any]]] = None

    def to_record(self) -> dict[str, Any]:
        return {
            "seed_entropy": self.seed_entropy,
            "utilization": self.utilization,
            "denial_rate": self.denial_rate,
            "deployments_accepted": self.deployments_accepted,
            "deployments_rejected": self.deployments_rejected,
            "scaleout_requests": self.scaleout_requests,
            "scaleouts_denied": self.scaleouts_denied,
            "failures": len(self.failure_events),
        }


@dataclass
class ExperimentResult:
    config_digest: str
    replications: list[SimResult]

    @property
    def utilizations(self) -> np.ndarray:
        return np.array([r.utilization for r in self.replications])

    @property
    def denial_rates(self) -> np.ndarray:
        return np.array([r.denial_rate for r in self.replications])

    @property
    def mean_utilization(self) -> float:
        return float(self.utilizations.mean())

    @property
    def stderr_utilization(self) -> float:
        return _stderr(self.utilizations)

    @property
    def mean_denial_rate(self) -> float:
        return float(self.denial_rates.mean())

    @property
    def stderr_denial_rate(self) -> float:
        return _stderr(self.denial_rates)

    def to_summary(self) -> dict[str, Any]:
        return {
            "config_digest": self.config_digest,
            "replications": len(self.replications),
            "mean_utilization": self.mean_utilization,
            # Percent and percentage points for reports.
            "utilization_pct": 100.0 * self.mean_utilization,
            "stderr_utilization_pp": 100.0 * self.stderr_utilization,
            "mean_denial_rate": self.mean_denial_rate,
            "stderr_denial_rate": self.stderr_denial_rate,
            "deployments_accepted": int(sum(r.deployments_accepted for r in self.replications)),
            "deployments_rejected": int(sum(r.deployments_rejected for r in self.replications)),
            "per_replication": [r.to_record() for r in self.replications],
        }


def _stderr(values: np.ndarray) -> float:
    if values.shape[0] < 2:
        return 0.0
    return float(values.std(ddof=1) / math.sqrt(values.shape[0]))


@dataclass
class _Deployment:
    params: DeploymentParams
    cores: int
    belief: Optional[BeliefState]
    last_flush: float


class _Replication:
    """Single-threaded event loop; one instance per replication."""

    def __init__(self, cfg: SimConfig, seed: SeedLike):
        self.cfg = cfg
        self.model = cfg.population
        self.policy = cfg.policy
        self.track_beliefs = cfg.policy.uses_moments
        self.info = InfoLevel(cfg.info_level)
        self.cache = ProfileCache.empty(cfg.policy.grid) if self.track_beliefs else None

        seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self.seed_entropy = f"{seq.entropy}:{','.join(str(k) for k in seq.spawn_key)}"
        # World dynamics and pseudo observations draw from separate streams so the
        # information level does not perturb the workload.
        world_seq, info_seq = seq.spawn(2)
        self.rng = np.random.default_rng(world_seq)
        self.info_rng = np.random.default_rng(info_seq)

        self.queue: list[tuple[float, int, int, int]] = []
        self.seq = 0
        self.deployments: dict[int, _Deployment] = {}
        self.next_id = 0
        self.active_total = 0
        self.area = 0.0
        self.clock = 0.0

        self.accepted = 0
        self.rejected = 0
        self.requests = 0
        self.denied = 0
        self.failures: list[tuple[float, int, int]] = []
        self.events: Optional[list[tuple[float, str, int, int, int]]] = [] if cfg.event_log else None
        self.decisions: Optional[list[dict[str, Any]]] = [] if cfg.record_decisions else None

    # -- queue ---------------------------------------------------------------

    def _push(self, time: float, kind: int, deployment_id: int) -> None:
        if time <= self.cfg.horizon:
            heapq.heappush(self.queue, (time, kind, deployment_id, self.seq))
            self.seq += 1

    def _log(self, time: float, kind: str, deployment_id: int, cores: int) -> None:
        if self.events is not None:
            self.events.append((time, kind, deployment_id, cores, self.active_total))

    def _schedule_arrival(self, now: float) -> None:
        if self.cfg.arrival_rate > 0:
            self._push(now + float(self.rng.exponential(1.0 / self.cfg.arrival_rate)), ARRIVAL, self.next_id)

    def _schedule(self, now: float, kind: ProcessKind, deployment_id: int, params: DeploymentParams) -> None:
        wait = sample_event_time(params, kind, self.rng, nu=self.model.nu, delta=self.model.delta)
        code = SCALEOUT if kind is ProcessKind.SCALEOUT else SHUTDOWN
        self._push(now + wait, code, deployment_id)

    def _activate(self, now: float, deployment_id: int, dep: _Deployment, cores: int) -> None:
        assert self.active_total + cores <= self.cfg.capacity_c, "capacity exceeded"
        dep.cores += cores
        self.active_total += cores
        for lifetime in self.rng.exponential(1.0 / dep.params.mu, size=cores):
            self._push(now + float(lifetime), CORE_DEATH, deployment_id)

    def _flush(self, now: float, dep: _Deployment) -> None:
        if dep.belief is not None:
            dep.belief = update_on_exposure(dep.belief, now - dep.last_flush, dep.cores)
            dep.last_flush = now

    def _refresh(self, now: float, dep: _Deployment) -> None:
        pending = (now - dep.last_flush) * dep.cores
        if dep.belief is not None and pending > self.cfg.exposure_refresh * dep.belief.mu_post.rate:
            self._flush(now, dep)

    def _kill(self, deployment_id: int) -> None:
        dep = self.deployments.pop(deployment_id)
        self.active_total -= dep.cores
        dep.cores = 0

    # -- handlers ------------------------------------------------------------

    def _on_arrival(self, now: float) -> None:
        deployment_id = self.next_id
        self.next_id += 1
        params = sample_deployment_params(self.model, self.rng)
        size = sample_initial_size(self.model, params, self.rng)

        belief = None
        active: dict[int, tuple[BeliefState, int]] = {}
        if self.track_beliefs:
            belief = init_belief(self.model, self.info, params, self.info_rng)
            for other_id, other in self.deployments.items():
                self._refresh(now, other)
                active[other_id] = (other.belief, other.cores)

        decision, _ = on_arrival(
            self.policy,
            self.cfg.capacity_c,
            active,
            Candidate(deployment_id, belief, size),
            active_cores=self.active_total,
            cache=self.cache,
        )
        if self.decisions is not None:
            self.decisions.append(decision_record(now, deployment_id, self.policy, decision))
        logger.debug(f"t={now:.3f} deployment {deployment_id} size {size}: {decision.reason}")

        if decision.accepted:
            self.accepted += 1
            dep = _Deployment(params=params, cores=0, belief=belief, last_flush=now)
            self.deployments[deployment_id] = dep
            self._activate(now, deployment_id, dep, size)
            self._schedule(now, ProcessKind.SCALEOUT, deployment_id, params)
            self._schedule(now, ProcessKind.SHUTDOWN, deployment_id, params)
            self._log(now, "arrival", deployment_id, size)
        else:
            self.rejected += 1
            self._log(now, "rejected", deployment_id, size)
        self._schedule_arrival(now)

    def _on_scaleout(self, now: float, deployment_id: int) -> None:
        dep = self.deployments[deployment_id]
        size = sample_scaleout_size(dep.params, self.rng)
        self.requests += 1

        self._flush(now, dep)
        if dep.belief is not None:
            dep.belief = update_on_scaleout(dep.belief, size, 0.0)

        if self.active_total + size <= self.cfg.capacity_c:
            self._activate(now, deployment_id, dep, size)
            self._log(now, "scaleout", deployment_id, size)
        else:
            # Granted entirely or not at all; one failure per denied request.
            self.denied += 1
            self.failures.append((now, deployment_id, size))
            self._log(now, "scaleout_denied", deployment_id, size)
        self._schedule(now, ProcessKind.SCALEOUT, deployment_id, dep.params)

    def _on_core_death(self, now: float, deployment_id: int) -> None:
        dep = self.deployments[deployment_id]
        self._flush(now, dep)
        if dep.belief is not None:
            dep.belief = update_on_core_death(dep.belief, 0.0)
        dep.cores -= 1
        self.active_total -= 1
        self._log(now, "core_death", deployment_id, 1)
        if dep.cores == 0:
            del self.deployments[deployment_id]

    def _on_shutdown(self, now: float, deployment_id: int) -> None:
        cores = self.deployments[deployment_id].cores
        self._kill(deployment_id)
        self._log(now, "shutdown", deployment_id, cores)

    # -- loop ----------------------------------------------------------------

    def run(self) -> SimResult:
        horizon = self.cfg.horizon
        self._schedule_arrival(0.0)

        while self.queue:
            time, kind, deployment_id, _ = heapq.heappop(self.queue)
            if kind != ARRIVAL and deployment_id not in self.deployments:
                continue  # stale event of a dead deployment
            self.area += self.active_total * (time - self.clock)
            self.clock = time
            if kind == ARRIVAL:
                self._on_arrival(time)
            elif kind == SCALEOUT:
                self._on_scaleout(time, deployment_id)
            elif kind == CORE_DEATH:
                self._on_core_death(time, deployment_id)
            else:
                self._on_shutdown(time, deployment_id)

        self.area += self.active_total * (horizon - self.clock)
        return SimResult(
            seed_entropy=self.seed_entropy,
            utilization=self.area / (self.cfg.capacity_c * horizon),
            denial_rate=self.denied / self.requests if self.requests else 0.0,
            deployments_accepted=self.accepted,
            deployments_rejected=self.rejected,
            scaleout_requests=self.requests,
            scaleouts_denied=self.denied,
            failure_events=self.failures,
            events=self.events,
            decisions=self.decisions,
        )


def run_replication(cfg: SimConfig, seed: SeedLike) -> SimResult:
    return _Replication(cfg, seed).run()


def replication_seeds(seed: int, replications: int) -> list[np.random.SeedSequence]:
    """Independent child seeds; results do not depend on how replications are spread over workers."""
    return np.random.SeedSequence(seed).spawn(replications)


def _run_job(job: tuple[SimConfig, np.random.SeedSequence]) -> SimResult:
    cfg, seed = job
    return run_replication(cfg, seed)


def run_experiment(
    cfg: SimConfig,
    *,
    parallel: int = 1,
    seeds: Optional[list[np.random.SeedSequence]] = None,
) -> ExperimentResult:
    """Run ``cfg.replications`` independent replications and aggregate them.

    ``seeds`` overrides the children of ``cfg.seed`` (calibration passes the same seeds to
    every trial).
    """
    if seeds is None:
        seeds = replication_seeds(cfg.seed, cfg.replications)
    jobs = [(cfg, s) for s in seeds]

    logger.info(
        f"Running {len(jobs)} replication(s): policy={cfg.policy.kind} capacity={cfg.capacity_c} "
        f"horizon={cfg.horizon}h info_level={cfg.info_level} workers={max(1, parallel)}"
    )
    if parallel > 1 and len(jobs) > 1:
        with multiprocessing.Pool(processes=min(parallel, len(jobs))) as pool:
            results = pool.map(_run_job, jobs)
    else:
        results = [_run_job(job) for job in jobs]

    experiment = ExperimentResult(config_digest=cfg.digest(), replications=results)
    logger.info(
        f"Utilization {100 * experiment.mean_utilization:.2f}% (+/- {100 * experiment.stderr_utilization:.2f} pp), "
        f"denial rate {experiment.mean_denial_rate:.6f}"
    )
    return experiment


def upper_bound_utilization(cfg: SimConfig, *, parallel: int = 1) -> ExperimentResult:
    """Reference run without an SLA: admit every deployment the cluster can physically hold."""
    admit_all = PolicyConfig(kind="zeroth", threshold_t=cfg.capacity_c + 1, grid=cfg.policy.grid)
    return run_experiment(cfg.with_policy(admit_all), parallel=parallel)
