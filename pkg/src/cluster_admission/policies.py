"""Admission policies: zeroth, first and second moment rules over the look-ahead grids."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Literal, Mapping, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .belief import BeliefState
from .errors import GridMismatchError
from .moments import LookaheadGrid, MomentProfile, moment_profiles_batch

logger = logging.getLogger(__name__)

PolicyKind = Literal["zeroth", "first", "second"]


class PolicyConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: PolicyKind
    # Core threshold for zeroth/first, Cantelli bound for second. Left empty in calibration templates.
    threshold_t: Optional[float] = None
    threshold_rho: Optional[float] = None
    grid: LookaheadGrid = LookaheadGrid()

    @model_validator(mode="after")
    def _check_thresholds(self) -> "PolicyConfig":
        if self.threshold_t is not None and not (math.isfinite(self.threshold_t) and self.threshold_t >= 1):
            raise ValueError("threshold_t must be >= 1")
        if self.threshold_rho is not None and not (0 < self.threshold_rho < 1):
            raise ValueError("threshold_rho must lie in (0, 1)")
        return self

    @property
    def uses_moments(self) -> bool:
        return self.kind != "zeroth"

    @property
    def threshold(self) -> float:
        value = self.threshold_rho if self.kind == "second" else self.threshold_t
        if value is None:
            name = "threshold_rho" if self.kind == "second" else "threshold_t"
            raise ValueError(f"{self.kind} moment policy needs {name}")
        return float(value)

    def with_threshold(self, value: float) -> "PolicyConfig":
        key = "threshold_rho" if self.kind == "second" else "threshold_t"
        return PolicyConfig.model_validate({**self.model_dump(), key: value})


@dataclass(frozen=True)
class AdmissionDecision:
    accepted: bool
    reason: str
    # Where the rule bound: (horizon index, step index) on the look-ahead grids.
    binding_horizon: Optional[int] = None
    binding_step: Optional[int] = None


ACCEPT = AdmissionDecision(True, "accepted")


@dataclass(eq=False)
class ClusterMomentState:
    """Element-wise totals of the active deployments' profiles."""

    grid: LookaheadGrid
    sum_e_L: np.ndarray
    sum_v_L: np.ndarray
    profiles: dict[int, MomentProfile] = field(default_factory=dict)

    @classmethod
    def empty(cls, grid: LookaheadGrid) -> "ClusterMomentState":
        return cls(grid=grid, sum_e_L=np.zeros(grid.shape), sum_v_L=np.zeros(grid.shape))

    @classmethod
    def from_profiles(cls, grid: LookaheadGrid, profiles: Mapping[int, MomentProfile]) -> "ClusterMomentState":
        state = cls.empty(grid)
        for deployment_id, profile in profiles.items():
            state.add(deployment_id, profile)
        return state

    def add(self, deployment_id: int, profile: MomentProfile) -> None:
        _check_grid(self.grid, profile)
        self.profiles[deployment_id] = profile
        self.sum_e_L += profile.e_L
        self.sum_v_L += profile.v_L

    def remove(self, deployment_id: int) -> None:
        profile = self.profiles.pop(deployment_id)
        self.sum_e_L -= profile.e_L
        self.sum_v_L -= profile.v_L
        np.maximum(self.sum_e_L, 0.0, out=self.sum_e_L)
        np.maximum(self.sum_v_L, 0.0, out=self.sum_v_L)

    def resum(self) -> None:
        """Rebuild the totals from the stored profiles, dropping rounding drift."""
        self.sum_e_L = np.zeros(self.grid.shape)
        self.sum_v_L = np.zeros(self.grid.shape)
        for profile in self.profiles.values():
            self.sum_e_L += profile.e_L
            self.sum_v_L += profile.v_L

    def check_consistency(self, rtol: float = 1e-9) -> None:
        e = np.zeros(self.grid.shape)
        v = np.zeros(self.grid.shape)
        for profile in self.profiles.values():
            e += profile.e_L
            v += profile.v_L
        assert np.allclose(e, self.sum_e_L, rtol=rtol, atol=1e-9), "sum_e_L out of sync"
        assert np.allclose(v, self.sum_v_L, rtol=rtol, atol=1e-9), "sum_v_L out of sync"
        assert np.all(self.sum_e_L >= 0) and np.all(self.sum_v_L >= 0)


# Profile replacements between full re-summations of a ProfileCache.
_RESUM_EVERY = 10_000


@dataclass(eq=False)
class ProfileCache:
    """Profiles of the active deployments kept across arrivals.

    A profile depends only on the deployment's belief and size, so it is re-evaluated only
    when either changed since the last arrival.
    """

    state: ClusterMomentState
    keys: dict[int, tuple[BeliefState, int]] = field(default_factory=dict)
    evaluated: int = 0
    _since_resum: int = 0

    @classmethod
    def empty(cls, grid: LookaheadGrid) -> "ProfileCache":
        return cls(state=ClusterMomentState.empty(grid))

    def stale(self, active: Mapping[int, tuple[BeliefState, int]]) -> list[int]:
        """Drop departed deployments; ids whose profile must be re-evaluated."""
        for deployment_id in [i for i in self.keys if i not in active]:
            del self.keys[deployment_id]
            self.state.remove(deployment_id)
        out = []
        for deployment_id, (belief, size) in active.items():
            cached = self.keys.get(deployment_id)
            if cached is None or cached[1] != size or not (cached[0] is belief or cached[0] == belief):
                out.append(deployment_id)
        return out

    def store(self, deployment_id: int, key: tuple[BeliefState, int], profile: MomentProfile) -> None:
        if deployment_id in self.keys:
            self.state.remove(deployment_id)
        self.keys[deployment_id] = key
        self.state.add(deployment_id, profile)
        self.evaluated += 1
        self._since_resum += 1
        if self._since_resum >= _RESUM_EVERY:
            self.state.resum()
            self._since_resum = 0


def _check_grid(grid: LookaheadGrid, profile: MomentProfile) -> None:
    if profile.grid != grid:
        raise GridMismatchError("moment profile was evaluated on a different look-ahead grid")


def _first_violation(mask: np.ndarray) -> tuple[int, int]:
    h, n = np.argwhere(mask)[0]
    return int(h), int(n)


def admit_zeroth(active_cores: int, new_size: int, t: float) -> AdmissionDecision:
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    if active_cores + new_size < t:
        return ACCEPT
    return AdmissionDecision(False, "active_threshold")


def admit_first(state: ClusterMomentState, new_profile: MomentProfile, t: float) -> AdmissionDecision:
    _check_grid(state.grid, new_profile)
    over = state.sum_e_L + new_profile.e_L >= t
    if not over.any():
        return ACCEPT
    h, n = _first_violation(over)
    return AdmissionDecision(False, "expected_threshold", h, n)


def admit_second(state: ClusterMomentState, new_profile: MomentProfile, rho: float, c: float) -> AdmissionDecision:
    if c <= 0:
        raise ValueError(f"capacity must be > 0, got {c}")
    if not 0 < rho < 1:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    _check_grid(state.grid, new_profile)

    E = state.sum_e_L + new_profile.e_L
    V = state.sum_v_L + new_profile.v_L
    over = E >= c
    if over.any():
        h, n = _first_violation(over)
        return AdmissionDecision(False, "expected_over_capacity", h, n)

    slack = c - E
    ratio = V / (V + slack * slack)
    risky = ratio > rho
    if risky.any():
        h, n = _first_violation(risky)
        return AdmissionDecision(False, "cantelli_bound", h, n)
    return ACCEPT


@dataclass(frozen=True)
class Candidate:
    deployment_id: int
    # Not needed by the zeroth moment rule.
    belief: Optional[BeliefState]
    size: int


def on_arrival(
    policy: PolicyConfig,
    capacity: int,
    active: Mapping[int, tuple[BeliefState, int]],
    candidate: Candidate,
    *,
    active_cores: Optional[int] = None,
    cache: Optional[ProfileCache] = None,
) -> tuple[AdmissionDecision, ClusterMomentState]:
    """Decide on an arriving deployment.

    ``active`` maps deployment id to (current belief, current cores). Every active profile is
    evaluated from the current instant, so the returned state reflects the shifted look-ahead
    origin. A deployment that does not physically fit is rejected under every policy.
    ``active_cores`` may be passed instead of beliefs when the policy is zeroth moment.

    With a ``cache`` only deployments whose belief or size changed since the previous call
    are re-evaluated, and the returned state is the cache's own, updated in place.
    """
    if active_cores is None:
        active_cores = sum(size for _, size in active.values())

    if active_cores + candidate.size > capacity:
        return AdmissionDecision(False, "capacity"), ClusterMomentState.empty(policy.grid)

    if policy.kind == "zeroth":
        return admit_zeroth(active_cores, candidate.size, policy.threshold), ClusterMomentState.empty(policy.grid)

    if candidate.belief is None:
        raise ValueError(f"{policy.kind} moment policy needs the candidate's belief")
    if cache is None:
        cache = ProfileCache.empty(policy.grid)
    elif cache.state.grid != policy.grid:
        raise GridMismatchError("profile cache was built for a different look-ahead grid")

    ids = cache.stale(active)
    beliefs = [active[i][0] for i in ids] + [candidate.belief]
    sizes = [active[i][1] for i in ids] + [candidate.size]
    profiles = moment_profiles_batch(beliefs, sizes, policy.grid)
    for deployment_id, profile in zip(ids, profiles):
        cache.store(deployment_id, active[deployment_id], profile)
    state = cache.state
    new_profile = profiles[-1]

    if policy.kind == "first":
        decision = admit_first(state, new_profile, policy.threshold)
    else:
        decision = admit_second(state, new_profile, policy.threshold, capacity)
    return decision, state


def decision_record(time: float, deployment_id: int, policy: PolicyConfig, decision: AdmissionDecision) -> dict[str, Any]:
    return {
        "time": float(time),
        "deployment_id": int(deployment_id),
        "policy": policy.kind,
        "threshold": policy.threshold,
        "accepted": decision.accepted,
        "reason": decision.reason,
        "binding_horizon": decision.binding_horizon,
        "binding_step": decision.binding_step,
    }
