"""Tests for the admission rules."""
from __future__ import annotations

import json

import numpy as np
import pytest
from pydantic import ValidationError

from cluster_admission.belief import BeliefState
from cluster_admission.errors import GridMismatchError
from cluster_admission.moments import LookaheadGrid, MomentProfile
from cluster_admission.policies import (
    Candidate,
    ClusterMomentState,
    PolicyConfig,
    ProfileCache,
    admit_first,
    admit_second,
    admit_zeroth,
    decision_record,
    on_arrival,
)
from cluster_admission.population import GammaParams, PopulationModel

GRID = LookaheadGrid(horizons=(24.0, 168.0), steps_per_horizon=4)


def flat_profile(e: float, v: float = 0.0, grid: LookaheadGrid = GRID) -> MomentProfile:
    return MomentProfile(
        grid=grid,
        e_L=np.full(grid.shape, e),
        v_L=np.full(grid.shape, v),
        truncated_at=(None,) * len(grid.horizons),
    )


def test_zeroth_examples():
    assert admit_zeroth(0, 5, 10).accepted
    assert admit_zeroth(4, 5, 10).accepted
    rejected = admit_zeroth(5, 5, 10)
    assert not rejected.accepted
    assert rejected.reason == "active_threshold"
    with pytest.raises(ValueError):
        admit_zeroth(0, 1, 0.5)


def test_first_moment_rule():
    state = ClusterMomentState.from_profiles(GRID, {1: flat_profile(2.0), 2: flat_profile(1.0)})
    assert admit_first(state, flat_profile(2.0), 6).accepted
    assert not admit_first(state, flat_profile(3.0), 6).accepted

    spike = flat_profile(0.0)
    spike.e_L[1, 3] = 10.0
    decision = admit_first(ClusterMomentState.empty(GRID), spike, 6)
    assert not decision.accepted
    assert decision.reason == "expected_threshold"
    assert (decision.binding_horizon, decision.binding_step) == (1, 3)


def test_second_moment_rule():
    empty = ClusterMomentState.empty(GRID)
    # No variance and room to spare.
    assert admit_second(empty, flat_profile(5.0, 0.0), 0.1, 10).accepted

    # V equal to the squared slack gives a Cantelli ratio of one half.
    borderline = flat_profile(6.0, 16.0)
    assert not admit_second(empty, borderline, 0.4, 10).accepted
    assert admit_second(empty, borderline, 0.6, 10).accepted
    assert admit_second(empty, borderline, 0.4, 10).reason == "cantelli_bound"

    over = admit_second(empty, flat_profile(10.0, 0.0), 0.9, 10)
    assert not over.accepted
    assert over.reason == "expected_over_capacity"

    with pytest.raises(ValueError):
        admit_second(empty, borderline, 1.0, 10)


def test_rules_are_monotone_in_the_candidate():
    state = ClusterMomentState.from_profiles(GRID, {1: flat_profile(3.0, 2.0)})
    for e in np.linspace(0, 8, 17):
        small, large = flat_profile(e, e), flat_profile(e + 0.5, e + 0.5)
        if not admit_first(state, small, 7).accepted:
            assert not admit_first(state, large, 7).accepted
        if not admit_second(state, small, 0.2, 10).accepted:
            assert not admit_second(state, large, 0.2, 10).accepted


def test_grid_mismatch():
    other = LookaheadGrid(horizons=(24.0,), steps_per_horizon=4)
    state = ClusterMomentState.empty(GRID)
    with pytest.raises(GridMismatchError):
        admit_first(state, flat_profile(1.0, grid=other), 5)
    with pytest.raises(GridMismatchError):
        state.add(1, flat_profile(1.0, grid=other))


def test_cluster_state_add_remove():
    state = ClusterMomentState.empty(GRID)
    state.add(1, flat_profile(2.0, 1.0))
    state.add(2, flat_profile(0.5, 0.25))
    assert np.allclose(state.sum_e_L, 2.5)
    state.remove(1)
    assert np.allclose(state.sum_e_L, 0.5)
    assert np.allclose(state.sum_v_L, 0.25)
    state.check_consistency()
    state.remove(2)
    assert not state.sum_e_L.any()


def test_policy_config():
    template = PolicyConfig(kind="first", grid=GRID)
    with pytest.raises(ValueError):
        template.threshold
    assert template.with_threshold(12).threshold == 12.0
    assert PolicyConfig(kind="second", threshold_rho=0.1).threshold == pytest.approx(0.1)
    assert not PolicyConfig(kind="zeroth", threshold_t=3).uses_moments
    with pytest.raises(ValidationError):
        PolicyConfig(kind="second", threshold_rho=1.5)
    with pytest.raises(ValidationError):
        PolicyConfig(kind="first", threshold_t=0)
    with pytest.raises(ValidationError):
        PolicyConfig(kind="third", threshold_t=3)


def _beliefs():
    prior = BeliefState.from_population(PopulationModel.fitted_default())
    sharp = BeliefState(
        lambda_post=GammaParams(50.0, 100.0),
        sigma_post=GammaParams(10.0, 10.0),
        mu_post=GammaParams(50.0, 10.0),
        nu=0.673,
        delta=0.119,
    )
    return prior, sharp


def test_on_arrival_capacity_is_physical():
    prior, _ = _beliefs()
    for policy in (
        PolicyConfig(kind="zeroth", threshold_t=1000),
        PolicyConfig(kind="first", threshold_t=1000, grid=GRID),
        PolicyConfig(kind="second", threshold_rho=0.99, grid=GRID),
    ):
        decision, _ = on_arrival(policy, 10, {1: (prior, 8)}, Candidate(2, prior, 3))
        assert not decision.accepted
        assert decision.reason == "capacity"


def test_on_arrival_zeroth_ignores_beliefs():
    prior, sharp = _beliefs()
    policy = PolicyConfig(kind="zeroth", threshold_t=10)
    a, _ = on_arrival(policy, 100, {1: (prior, 4)}, Candidate(2, prior, 3))
    b, _ = on_arrival(policy, 100, {1: (sharp, 4)}, Candidate(2, sharp, 3))
    c, _ = on_arrival(policy, 100, {}, Candidate(2, None, 3), active_cores=4)
    assert a == b == c
    assert a.accepted


def test_on_arrival_is_pure():
    prior, sharp = _beliefs()
    policy = PolicyConfig(kind="second", threshold_rho=0.1, grid=GRID)
    active = {1: (prior, 4), 7: (sharp, 2)}
    first_decision, first_state = on_arrival(policy, 50, active, Candidate(9, sharp, 3))
    second_decision, second_state = on_arrival(policy, 50, active, Candidate(9, sharp, 3))
    assert first_decision == second_decision
    assert np.array_equal(first_state.sum_e_L, second_state.sum_e_L)
    assert set(first_state.profiles) == {1, 7}
    first_state.check_consistency()


def test_on_arrival_empty_cluster_depends_on_candidate_only():
    _, sharp = _beliefs()
    policy = PolicyConfig(kind="first", threshold_t=5, grid=GRID)
    small, _ = on_arrival(policy, 100, {}, Candidate(1, sharp, 2))
    big, _ = on_arrival(policy, 100, {}, Candidate(1, sharp, 6))
    assert small.accepted
    assert not big.accepted
    assert big.binding_step == 0


def test_on_arrival_requires_candidate_belief_for_moment_policies():
    with pytest.raises(ValueError):
        on_arrival(PolicyConfig(kind="first", threshold_t=5, grid=GRID), 10, {}, Candidate(1, None, 1))


def test_decision_record_is_json():
    policy = PolicyConfig(kind="first", threshold_t=5, grid=GRID)
    decision = admit_first(ClusterMomentState.empty(GRID), flat_profile(6.0), 5)
    record = decision_record(1.5, 3, policy, decision)
    assert json.loads(json.dumps(record)) == record
    assert record["reason"] == "expected_threshold"
    assert record["binding_step"] == 0


def test_profile_cache_matches_fresh_evaluation():
    prior, sharp = _beliefs()
    policy = PolicyConfig(kind="second", threshold_rho=0.2, grid=GRID)
    cache = ProfileCache.empty(GRID)
    active = {1: (prior, 4), 2: (sharp, 2), 3: (sharp, 5)}
    on_arrival(policy, 60, active, Candidate(9, sharp, 3), cache=cache)
    assert cache.evaluated == 3

    # One deployment grew, one left, one arrived.
    active = {1: (prior, 4), 2: (sharp, 3), 4: (prior, 1)}
    cached_decision, cached_state = on_arrival(policy, 60, active, Candidate(10, prior, 2), cache=cache)
    fresh_decision, fresh_state = on_arrival(policy, 60, active, Candidate(10, prior, 2))
    assert cache.evaluated == 5
    assert cached_decision == fresh_decision
    assert set(cached_state.profiles) == {1, 2, 4}
    np.testing.assert_allclose(cached_state.sum_e_L, fresh_state.sum_e_L, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(cached_state.sum_v_L, fresh_state.sum_v_L, rtol=1e-12, atol=1e-12)
    cached_state.check_consistency()


def test_profile_cache_reuses_unchanged_beliefs():
    prior, sharp = _beliefs()
    policy = PolicyConfig(kind="first", threshold_t=100, grid=GRID)
    cache = ProfileCache.empty(GRID)
    active = {i: (sharp, 2) for i in range(5)}
    on_arrival(policy, 100, active, Candidate(9, prior, 1), cache=cache)
    on_arrival(policy, 100, dict(active), Candidate(10, prior, 1), cache=cache)
    assert cache.evaluated == 5
    # Equal but distinct belief objects count as unchanged.
    copy = BeliefState(**{name: getattr(sharp, name) for name in sharp.__dataclass_fields__})
    on_arrival(policy, 100, {**active, 0: (copy, 2)}, Candidate(11, prior, 1), cache=cache)
    assert cache.evaluated == 5


def test_profile_cache_rejects_other_grid():
    prior, _ = _beliefs()
    policy = PolicyConfig(kind="first", threshold_t=100, grid=GRID)
    other = ProfileCache.empty(LookaheadGrid(horizons=(24.0,), steps_per_horizon=4))
    with pytest.raises(GridMismatchError):
        on_arrival(policy, 100, {1: (prior, 1)}, Candidate(2, prior, 1), cache=other)


def test_cluster_state_resum_matches_running_totals():
    state = ClusterMomentState.empty(GRID)
    for i in range(20):
        state.add(i, flat_profile(0.1 * i, 0.01 * i))
    for i in range(0, 20, 3):
        state.remove(i)
    running = state.sum_e_L.copy()
    state.resum()
    np.testing.assert_allclose(state.sum_e_L, running, rtol=1e-12)
    state.check_consistency()
