"""Binary search for the largest admission threshold that still meets the SLA."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

from .errors import InfeasibleBracketError
from .simulator import SimConfig, replication_seeds, run_experiment

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Trial:
    threshold: float
    mean_denial_rate: float
    mean_utilization: float
    feasible: bool


@dataclass
class CalibrationResult:
    policy: str
    threshold: float
    sla_tau: float
    bounds: tuple[float, float]
    tolerance: float
    trials: list[Trial] = field(default_factory=list)

    def to_record(self) -> dict[str, Any]:
        return {
            "policy": self.policy,
            "threshold": self.threshold,
            "sla_tau": self.sla_tau,
            "bounds": list(self.bounds),
            "tolerance": self.tolerance,
            "trials": [asdict(p) for p in self.trials],
        }


def calibrate_threshold(
    cfg: SimConfig,
    bounds: tuple[float, float],
    *,
    sla_tau: Optional[float] = None,
    tolerance: Optional[float] = None,
    parallel: int = 1,
) -> CalibrationResult:
    """Largest threshold in ``bounds`` whose mean denial rate is at most ``sla_tau``.

    Denial rate is assumed non-decreasing in the threshold. Every trial reuses the same
    replication seeds. Core thresholds (zeroth, first) are searched over integers; the
    Cantelli bound of the second moment policy over reals.
    """
    tau = cfg.sla_tau if sla_tau is None else sla_tau
    if not 0 <= tau <= 1:
        raise ValueError(f"sla_tau must lie in [0, 1], got {tau}")
    lo, hi = float(bounds[0]), float(bounds[1])
    if not lo < hi:
        raise ValueError(f"bounds must satisfy lower < upper, got {bounds}")

    integer = cfg.policy.kind != "second"
    if integer:
        lo, hi = float(math.ceil(lo)), float(math.floor(hi))
        if not lo < hi:
            raise ValueError(f"bounds {bounds} contain fewer than two integer thresholds")
    if tolerance is None:
        tolerance = 1.0 if integer else 1e-3
    if tolerance <= 0:
        raise ValueError(f"tolerance must be > 0, got {tolerance}")

    seeds = replication_seeds(cfg.seed, cfg.replications)
    result = CalibrationResult(
        policy=cfg.policy.kind, threshold=lo, sla_tau=tau, bounds=(lo, hi), tolerance=tolerance
    )

    def trial(threshold: float) -> bool:
        experiment = run_experiment(
            cfg.with_policy(cfg.policy.with_threshold(threshold)), seeds=seeds, parallel=parallel
        )
        feasible = experiment.mean_denial_rate <= tau
        result.trials.append(
            Trial(threshold, experiment.mean_denial_rate, experiment.mean_utilization, feasible)
        )
        logger.info(
            f"Trial {cfg.policy.kind} threshold={threshold:g}: denial={experiment.mean_denial_rate:.6g} "
            f"utilization={100 * experiment.mean_utilization:.2f}% -> {'ok' if feasible else 'violates SLA'}"
        )
        return feasible

    if trial(hi):
        result.threshold = hi
        return result
    if not trial(lo):
        raise InfeasibleBracketError(
            f"lower bound {lo:g} already violates the SLA (denial rate {result.trials[-1].mean_denial_rate:.6g} > {tau:g})",
            lower=lo,
            denial_rate=result.trials[-1].mean_denial_rate,
        )

    while hi - lo > tolerance:
        mid = math.floor((lo + hi) / 2) if integer else (lo + hi) / 2
        if mid <= lo or mid >= hi:
            break
        if trial(float(mid)):
            lo = float(mid)
        else:
            hi = float(mid)

    result.threshold = lo
    logger.info(f"Calibrated {cfg.policy.kind} threshold: {lo:g} after {len(result.trials)} trials")
    return result
