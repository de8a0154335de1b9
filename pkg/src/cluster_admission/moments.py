"""First and second moments of a deployment's future size on the look-ahead grids.

A deployment's size at look-ahead step n is L_n = Omega_n * D_n * (Q_n + B_n):

* B_n  cores alive now that are still alive at n,
* Q_n  cores added by scale-outs between now and n that are still alive,
* D_n  indicator that the deployment has not died of core attrition,
* Omega_n  indicator that it has not been shut down.

All expectations are taken over the Gamma posteriors of a ``BeliefState``. Grid steps are
mapped to hours before any closed form is evaluated. Components are treated as
uncorrelated and V[D_n] is replaced by its Bhatia-Davis maximum E[D_n](1 - E[D_n]).

Everything here is vectorized over deployments so that re-evaluating a whole cluster
costs O(|X| * n) for n grid steps.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.special import gammaln

from .belief import BeliefState
from .population import GammaParams

logger = logging.getLogger(__name__)

DEFAULT_HORIZONS: tuple[float, ...] = (24.0, 168.0, 720.0, 8760.0, 26280.0)

# Largest survival probability fed to log1p(-p); keeps the death recursion finite.
_MAX_SURVIVAL = 1.0 - float(np.finfo(float).eps)
# Deployments evaluated together; keeps the per-lag work arrays cache sized.
_BLOCK = 64


class LookaheadGrid(BaseModel):
    """Independent look-ahead horizons (hours), each cut into the same number of steps."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    horizons: tuple[float, ...] = DEFAULT_HORIZONS
    steps_per_horizon: int = 600
    marginality_epsilon: float = 1e-5

    @field_validator("horizons")
    @classmethod
    def _increasing(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        if not value:
            raise ValueError("at least one horizon is required")
        if any(h <= 0 or not math.isfinite(h) for h in value):
            raise ValueError("horizons must be positive and finite")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("horizons must be strictly increasing")
        return value

    @model_validator(mode="after")
    def _check_steps(self) -> "LookaheadGrid":
        if self.steps_per_horizon < 1:
            raise ValueError("steps_per_horizon must be >= 1")
        if not self.marginality_epsilon > 0:
            raise ValueError("marginality_epsilon must be > 0")
        return self

    @property
    def step_hours(self) -> tuple[float, ...]:
        return tuple(h / self.steps_per_horizon for h in self.horizons)

    @property
    def shape(self) -> tuple[int, int]:
        """(number of horizons, points per horizon); point 0 is the current instant."""
        return len(self.horizons), self.steps_per_horizon + 1

    def hours(self, horizon_index: int) -> np.ndarray:
        dt = self.step_hours[horizon_index]
        return np.arange(self.steps_per_horizon + 1) * dt


@dataclass(frozen=True, eq=False)
class MomentProfile:
    """Per-step E[L] and V[L] for every horizon, shape ``grid.shape``."""

    grid: LookaheadGrid
    e_L: np.ndarray
    v_L: np.ndarray
    # First zeroed step per horizon, or None when the profile never became marginal.
    truncated_at: tuple[Optional[int], ...]

    @staticmethod
    def zeros(grid: LookaheadGrid) -> "MomentProfile":
        return MomentProfile(
            grid=grid,
            e_L=np.zeros(grid.shape),
            v_L=np.zeros(grid.shape),
            truncated_at=(0,) * len(grid.horizons),
        )


# ---------------------------------------------------------------------------
# Closed-form building blocks
# ---------------------------------------------------------------------------


def _log_mu_power_exp(shape, rate, power, s):
    """log E[mu^power * exp(-s * mu)] for mu ~ Gamma(shape, rate); broadcasts."""
    return gammaln(shape + power) - gammaln(shape) + shape * np.log(rate) - (shape + power) * np.log(s + rate)


def _check_power(mu_post: GammaParams, power: float) -> None:
    if mu_post.shape + power <= 0:
        raise ValueError(
            f"E[mu^{power}] is infinite for mu shape {mu_post.shape}; need shape + power > 0"
        )


def e_mu_nu_exp(mu_post: GammaParams, nu: float, s: float) -> float:
    """E[mu^nu * exp(-s * mu)] with s in hours."""
    if s < 0:
        raise ValueError(f"s must be >= 0, got {s}")
    _check_power(mu_post, nu)
    return float(np.exp(_log_mu_power_exp(mu_post.shape, mu_post.rate, nu, s)))


def e_mu_2nu_exp(mu_post: GammaParams, nu: float, s: float) -> float:
    """E[mu^(2 nu) * exp(-s * mu)] with s in hours."""
    if s < 0:
        raise ValueError(f"s must be >= 0, got {s}")
    _check_power(mu_post, 2.0 * nu)
    return float(np.exp(_log_mu_power_exp(mu_post.shape, mu_post.rate, 2.0 * nu, s)))


def e_Z(mu_post: GammaParams, n: int, i: int, *, dt: float = 1.0) -> float:
    """Probability that a core alive at step i is still alive at step n (Lomax survival)."""
    if n < i:
        raise ValueError(f"n must be >= i, got n={n}, i={i}")
    lag = (n - i) * dt
    return float((mu_post.rate / (lag + mu_post.rate)) ** mu_post.shape)


def v_Z(mu_post: GammaParams, n: int, i: int, *, dt: float = 1.0) -> float:
    p = e_Z(mu_post, n, i, dt=dt)
    return p * (1.0 - p)


def e_Omega(mu_post: GammaParams, delta: float, n: int, *, dt: float = 1.0) -> float:
    """Probability that the deployment has not been shut down by step n."""
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    lag = delta * n * dt
    return float((mu_post.rate / (lag + mu_post.rate)) ** mu_post.shape)


def v_Omega(mu_post: GammaParams, delta: float, n: int, *, dt: float = 1.0) -> float:
    p = e_Omega(mu_post, delta, n, dt=dt)
    return p * (1.0 - p)


# ---------------------------------------------------------------------------
# Vectorized component evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _BeliefArrays:
    lam_shape: np.ndarray
    lam_rate: np.ndarray
    sig_shape: np.ndarray
    sig_rate: np.ndarray
    mu_shape: np.ndarray
    mu_rate: np.ndarray
    nu: np.ndarray
    delta: np.ndarray

    @staticmethod
    def from_beliefs(beliefs: Sequence[BeliefState]) -> "_BeliefArrays":
        def col(get) -> np.ndarray:
            return np.fromiter((get(b) for b in beliefs), dtype=float, count=len(beliefs))

        arrays = _BeliefArrays(
            lam_shape=col(lambda b: b.lambda_post.shape),
            lam_rate=col(lambda b: b.lambda_post.rate),
            sig_shape=col(lambda b: b.sigma_post.shape),
            sig_rate=col(lambda b: b.sigma_post.rate),
            mu_shape=col(lambda b: b.mu_post.shape),
            mu_rate=col(lambda b: b.mu_post.rate),
            nu=col(lambda b: b.nu),
            delta=col(lambda b: b.delta),
        )
        if np.any(arrays.mu_shape + 2.0 * np.minimum(arrays.nu, 0.0) <= 0):
            raise ValueError("mu posterior shape too small for the power law exponent nu")
        return arrays

    def block(self, rows: slice) -> "_BeliefArrays":
        return _BeliefArrays(**{name: getattr(self, name)[rows] for name in self.__dataclass_fields__})


@dataclass(frozen=True, eq=False)
class _Components:
    """Component moments, each of shape (deployments, n_steps + 1)."""

    e_Q: np.ndarray
    v_Q: np.ndarray
    e_B: np.ndarray
    v_B: np.ndarray
    e_D: np.ndarray
    e_Omega: np.ndarray


def _components(p: _BeliefArrays, sizes: np.ndarray, dt: float, n_steps: int) -> _Components:
    n_dep = sizes.shape[0]
    N = n_steps
    zeros = np.zeros((n_dep, 1))

    ma = p.mu_shape[:, None]
    mb = p.mu_rate[:, None]
    nu = p.nu[:, None]
    lags = np.arange(2 * N + 1, dtype=float) * dt
    log_b = np.log(mb)
    log_sb = np.log(lags[None, :] + mb)  # log(s + b), shape (X, 2N+1)
    log_z = ma * (log_b - log_sb)

    # E[mu^nu e^{-s mu}] and E[mu^{2nu} e^{-s mu}] at every lag 0..2N, sharing log(s + b).
    log_g = log_z + (gammaln(ma + nu) - gammaln(ma)) - nu * log_sb
    g = np.exp(log_g)
    u = np.exp(log_g + (gammaln(ma + 2 * nu) - gammaln(ma + nu)) - nu * log_sb)

    e_lam = p.lam_shape / p.lam_rate
    v_lam = p.lam_shape / p.lam_rate**2
    e_sig = p.sig_shape / p.sig_rate
    v_sig = p.sig_shape / p.sig_rate**2
    e_s1 = e_sig + 1.0
    e_s1_sq = v_sig + e_s1**2
    e_x = e_lam * e_s1
    # V[lambda (sigma + 1)] for independent factors.
    v_x = e_lam**2 * v_sig + v_lam * e_s1**2 + v_lam * v_sig

    # Prefix sums over lags m = 1..k.
    G1 = np.concatenate([zeros, np.cumsum(g[:, 1 : N + 1], axis=1)], axis=1)
    H1 = np.concatenate([zeros, np.cumsum(g[:, 2 : 2 * N + 1 : 2], axis=1)], axis=1)
    U = np.concatenate([zeros, np.cumsum(u[:, 1:], axis=1)], axis=1)
    k = np.arange(1, N + 1)
    # Full double sum S2(k) = sum_{m, m' = 1..k} u(m + m'), grown one row and column per step.
    inc = 2.0 * (U[:, 2 * k - 1] - U[:, k]) + u[:, 2 * k]
    S2 = np.concatenate([zeros, np.cumsum(inc, axis=1)], axis=1)
    var_G = np.maximum(S2 - G1**2, 0.0)

    # Scale-outs in steps 1..n-1 contribute to Q_n.
    q_idx = np.maximum(np.arange(N + 1) - 1, 0)
    Gq, Hq, VGq = G1[:, q_idx], H1[:, q_idx], var_G[:, q_idx]

    e_Q = dt * (e_lam * e_s1)[:, None] * Gq
    mean_cond_var = dt * e_lam[:, None] * ((e_s1_sq - 1.0)[:, None] * Hq + e_s1[:, None] * Gq)
    var_cond_mean = dt**2 * ((e_x**2 + v_x)[:, None] * VGq + v_x[:, None] * Gq**2)
    v_Q = mean_cond_var + var_cond_mean

    z = np.exp(log_z[:, : N + 1])
    C = sizes[:, None]
    e_B = C * z
    v_B = C * z * (1.0 - z)

    # Death recursion: E[D_i] = E[D_{i-1}] (1 - (1 - z_i)^C prod_{m<i} (1 - z_m)^E).
    log_dead = np.log1p(-np.minimum(z[:, 1:], _MAX_SURVIVAL))
    expo = dt * e_lam * g[:, 0] * (p.sig_shape / p.sig_rate)
    earlier = np.concatenate([zeros, np.cumsum(log_dead, axis=1)[:, :-1]], axis=1)
    factor = 1.0 - np.exp(C * log_dead + expo[:, None] * earlier)
    e_D = np.concatenate([np.ones((n_dep, 1)), np.cumprod(np.clip(factor, 0.0, 1.0), axis=1)], axis=1)

    steps = np.arange(N + 1, dtype=float) * dt
    e_Om = np.exp(ma * (log_b - np.log(p.delta[:, None] * steps[None, :] + mb)))

    return _Components(e_Q=e_Q, v_Q=v_Q, e_B=e_B, v_B=v_B, e_D=e_D, e_Omega=e_Om)


def _combine(c: _Components) -> tuple[np.ndarray, np.ndarray]:
    e_W = c.e_Q + c.e_B
    v_W = c.v_Q + c.v_B
    v_D = c.e_D * (1.0 - c.e_D)
    e_DW = c.e_D * e_W
    v_DW = c.e_D**2 * v_W + v_D * e_W**2 + v_D * v_W
    v_Om = c.e_Omega * (1.0 - c.e_Omega)
    e_L = c.e_Omega * e_DW
    v_L = c.e_Omega**2 * v_DW + v_Om * e_DW**2 + v_Om * v_DW
    return e_L, np.maximum(v_L, 0.0)


def _single(b: BeliefState, C: int, n: int, dt: float) -> _Components:
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    return _components(_BeliefArrays.from_beliefs([b]), np.array([float(C)]), dt, n)


def e_Q(b: BeliefState, n: int, *, dt: float = 1.0) -> float:
    """Expected cores added by scale-outs during steps 1..n-1 that survive to step n."""
    return float(_single(b, 0, n, dt).e_Q[0, n])


def v_Q(b: BeliefState, n: int, *, dt: float = 1.0) -> float:
    return float(_single(b, 0, n, dt).v_Q[0, n])


def e_B(b: BeliefState, C: int, n: int, *, dt: float = 1.0) -> float:
    if C < 0:
        raise ValueError(f"C must be >= 0, got {C}")
    return float(_single(b, C, n, dt).e_B[0, n])


def v_B(b: BeliefState, C: int, n: int, *, dt: float = 1.0) -> float:
    if C < 0:
        raise ValueError(f"C must be >= 0, got {C}")
    return float(_single(b, C, n, dt).v_B[0, n])


def e_D(b: BeliefState, C: int, n: int, *, dt: float = 1.0) -> float:
    """Product-recursion estimate of the probability that the deployment has not died of core attrition by step n.

    Without scale-outs the product never exceeds the exact survival 1 - (1 - E[Z_n])^C.
    """
    if C < 1:
        raise ValueError(f"C must be >= 1 for a live deployment, got {C}")
    return float(_single(b, C, n, dt).e_D[0, n])


# ---------------------------------------------------------------------------
# Profiles
# ---------------------------------------------------------------------------


def _truncate(e_L: np.ndarray, v_L: np.ndarray, eps: float) -> np.ndarray:
    """Zero everything from the first marginal step on; returns the cutoff per row (-1 for none)."""
    marginal = (e_L < eps) & (v_L < eps)
    has_cut = marginal.any(axis=1)
    first = np.where(has_cut, marginal.argmax(axis=1), -1)
    cols = np.arange(e_L.shape[1])[None, :]
    dead = has_cut[:, None] & (cols >= first[:, None])
    e_L[dead] = 0.0
    v_L[dead] = 0.0
    return first


def moment_profiles_batch(
    beliefs: Sequence[BeliefState],
    sizes: Sequence[int] | np.ndarray,
    grid: LookaheadGrid,
) -> list[MomentProfile]:
    """Profiles for many deployments in one vectorized pass per horizon."""
    sizes_arr = np.asarray(sizes, dtype=float)
    if len(beliefs) != sizes_arr.shape[0]:
        raise ValueError("beliefs and sizes must have the same length")
    if len(beliefs) == 0:
        return []
    if np.any(sizes_arr < 0):
        raise ValueError("deployment sizes must be >= 0")

    arrays = _BeliefArrays.from_beliefs(beliefs)
    n_h, n_pts = grid.shape
    e_all = np.empty((len(beliefs), n_h, n_pts))
    v_all = np.empty_like(e_all)
    cuts = np.empty((len(beliefs), n_h), dtype=int)

    with np.errstate(over="ignore", under="ignore"):
        for start in range(0, len(beliefs), _BLOCK):
            rows = slice(start, start + _BLOCK)
            block = arrays.block(rows)
            for h, dt in enumerate(grid.step_hours):
                e_L, v_L = _combine(_components(block, sizes_arr[rows], dt, grid.steps_per_horizon))
                cuts[rows, h] = _truncate(e_L, v_L, grid.marginality_epsilon)
                e_all[rows, h, :] = e_L
                v_all[rows, h, :] = v_L

    if not (np.all(np.isfinite(e_all)) and np.all(np.isfinite(v_all))):
        raise FloatingPointError("non-finite moment encountered")
    if np.any(e_all < 0):
        raise FloatingPointError("negative expected size encountered")

    return [
        MomentProfile(
            grid=grid,
            e_L=e_all[x],
            v_L=v_all[x],
            truncated_at=tuple(None if c < 0 else int(c) for c in cuts[x]),
        )
        for x in range(len(beliefs))
    ]


def moment_profile(b: BeliefState, C: int, grid: LookaheadGrid) -> MomentProfile:
    if C == 0:
        return MomentProfile.zeros(grid)
    return moment_profiles_batch([b], [C], grid)[0]


def profile_to_csv(profile: MomentProfile, path: Path | str) -> Path:
    """Write ``horizon_hours,step,hours,e_L,v_L`` rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["horizon_hours", "step", "hours", "e_L", "v_L"])
        for h, horizon in enumerate(profile.grid.horizons):
            hours = profile.grid.hours(h)
            for n in range(hours.shape[0]):
                writer.writerow(
                    [horizon, n, repr(float(hours[n])), repr(float(profile.e_L[h, n])), repr(float(profile.v_L[h, n]))]
                )
    return path
