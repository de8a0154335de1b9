"""Command line entry point: ``cluster-admission <command> [options]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__
from .azure_trace import SECONDS_PER_HOUR, read_azure_vm_table, vm_table_to_events
from .belief import BeliefState, InfoLevel, belief_from_record, belief_to_record, init_belief
from .calibration import calibrate_threshold
from .central_log import configure_logging, log_event
from .common_utils import config_digest, safe_config_save
from .config import dump_model, load_population, load_pricing, load_sim_config, read_document, validate_document
from .errors import AdmissionError, ConfigError
from .moments import LookaheadGrid, moment_profile, profile_to_csv
from .policies import PolicyConfig
from .population import PopulationModel, sample_deployment_params
from .pricing import labeling_savings, mixture_variance, price_table, resolve_variances
from .simulator import ExperimentResult, SimConfig, run_experiment, upper_bound_utilization
from .trace_fit import FitConfig, calibrate_P1_P2, fit_trace, generate_trace, read_trace_csv, write_trace_csv

logger = logging.getLogger(__name__)


@dataclass
class RunManifest:
    command: str
    config_digest: str
    seed: Optional[int]
    code_version: str
    started_at: str
    elapsed_seconds: float = 0.0
    outputs: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got '{text}'") from None


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got '{text}'") from None


def _override(cfg: SimConfig, **updates: Any) -> SimConfig:
    updates = {k: v for k, v in updates.items() if v is not None}
    if not updates:
        return cfg
    return validate_document(SimConfig, {**cfg.model_dump(), **updates}, source="command line overrides")


def _write_json(path: Path, data: Any) -> Path:
    if not safe_config_save(path, data):
        raise AdmissionError(f"could not write {path}")
    return path


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _experiment_outputs(result: ExperimentResult, out: Path, *, event_log: bool, decisions: bool) -> list[Path]:
    paths = [_write_json(out / "summary.json", result.to_summary())]
    if event_log:
        rows = [
            (rep, repr(t), kind, dep, cores, active)
            for rep, r in enumerate(result.replications)
            for (t, kind, dep, cores, active) in (r.events or [])
        ]
        paths.append(
            _write_csv(out / "events.csv", ["replication", "time", "kind", "deployment_id", "cores", "active_total"], rows)
        )
    if decisions:
        path = out / "decisions.jsonl"
        with path.open("w", encoding="utf-8") as f:
            for rep, r in enumerate(result.replications):
                for record in r.decisions or []:
                    f.write(json.dumps({"replication": rep, **record}, sort_keys=True) + "\n")
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> tuple[str, Optional[int], list[Path]]:
    cfg = load_sim_config(args.config)
    cfg = _override(
        cfg,
        seed=args.seed,
        replications=args.reps,
        event_log=True if args.event_log else None,
        record_decisions=True if args.decisions else None,
    )
    result = run_experiment(cfg, parallel=args.parallel)
    paths = _experiment_outputs(result, args.out, event_log=cfg.event_log, decisions=cfg.record_decisions)
    return cfg.digest(), cfg.seed, paths


def cmd_upper_bound(args: argparse.Namespace) -> tuple[str, Optional[int], list[Path]]:
    cfg = _override(load_sim_config(args.config), seed=args.seed, replications=args.reps)
    result = upper_bound_utilization(cfg, parallel=args.parallel)
    return cfg.digest(), cfg.seed, [_write_json(args.out / "summary.json", result.to_summary())]


def cmd_calibrate(args: argparse.Namespace) -> tuple[str, Optional[int], list[Path]]:
    cfg = load_sim_config(args.config)
    if args.policy is not None and args.policy != cfg.policy.kind:
        cfg = cfg.with_policy(PolicyConfig(kind=args.policy, grid=cfg.policy.grid))
    cfg = _override(cfg, seed=args.seed, replications=args.reps)
    lower, upper = args.lower, args.upper
    if lower is None or upper is None:
        default = (1.0, float(cfg.capacity_c)) if cfg.policy.kind != "second" else (1e-4, 0.5)
        lower = default[0] if lower is None else lower
        upper = default[1] if upper is None else upper
    try:
        result = calibrate_threshold(
            cfg, (lower, upper), sla_tau=args.sla_tau, tolerance=args.tolerance, parallel=args.parallel
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for trial in result.trials:
        log_event("calibration_trial", fields={"policy": result.policy, **asdict(trial)}, log_root=args.log_dir)
    return cfg.digest(), cfg.seed, [_write_json(args.out / "calibration.json", result.to_record())]


def cmd_sweep_info(args: argparse.Namespace) -> tuple[str, Optional[int], list[Path]]:
    cfg = _override(load_sim_config(args.config), seed=args.seed, replications=args.reps)
    rows = []
    for kind in args.policies:
        for level in args.levels:
            level_cfg = _override(cfg, info_level=level)
            if kind != level_cfg.policy.kind:
                if not args.calibrate:
                    raise ConfigError(f"no threshold for policy '{kind}' in {args.config}; pass --calibrate")
                level_cfg = level_cfg.with_policy(PolicyConfig(kind=kind, grid=cfg.policy.grid))
            if args.calibrate:
                bounds = args.rho_bounds if kind == "second" else args.t_bounds
                calibrated = calibrate_threshold(level_cfg, tuple(bounds), parallel=args.parallel)
                level_cfg = level_cfg.with_policy(level_cfg.policy.with_threshold(calibrated.threshold))
            threshold = level_cfg.policy.threshold
            result = run_experiment(level_cfg, parallel=args.parallel)
            rows.append(
                (
                    kind,
                    level,
                    repr(threshold),
                    repr(result.mean_utilization),
                    repr(result.stderr_utilization),
                    repr(result.mean_denial_rate),
                )
            )
            logger.info(f"{kind} level {level}: utilization {100 * result.mean_utilization:.2f}%")
    path = _write_csv(
        args.out / "sweep.csv", ["policy", "level", "threshold", "utilization", "stderr", "denial_rate"], rows
    )
    return cfg.digest(), cfg.seed, [path]


def cmd_moments(args: argparse.Namespace) -> tuple[str, Optional[int], list[Path]]:
    grid = LookaheadGrid()
    model: Optional[PopulationModel] = None
    if args.config is not None:
        data = read_document(args.config)
        model = load_population(args.config)
        if "policy" in data and isinstance(data["policy"], dict) and "grid" in data["policy"]:
            grid = validate_document(LookaheadGrid, data["policy"]["grid"], source=f"{args.config} policy.grid")

    seed = 0 if args.seed is None else args.seed
    cores = args.cores
    if args.belief is not None:
        record = read_document(args.belief)
        if cores is None and isinstance(record.get("cores"), int):
            cores = record["cores"]
        try:
            belief = belief_from_record(record.get("belief", record))
        except ValueError as exc:
            raise ConfigError(f"{args.belief}: {exc}") from exc
    else:
        assert model is not None
        belief = BeliefState.from_population(model)
        if args.info_level:
            rng = np.random.default_rng(seed)
            true_params = sample_deployment_params(model, rng)
            belief = init_belief(model, InfoLevel(args.info_level), true_params, rng)
    cores = 1 if cores is None else cores
    if cores < 1:
        raise ConfigError(f"a deployment needs at least one core, got {cores}")
    profile = moment_profile(belief, cores, grid)

    paths = [profile_to_csv(profile, args.out / "moments.csv")]
    paths.append(
        _write_json(
            args.out / "belief.json",
            {"belief": belief_to_record(belief), "cores": cores, "truncated_at": list(profile.truncated_at)},
        )
    )
    return config_digest({"belief": belief_to_record(belief), "cores": cores, "grid": grid.model_dump(mode="json")}), seed, paths


def cmd_price(args: argparse.Namespace) -> tuple[str, Optional[int], list[Path]]:
    mixture = load_pricing(args.config)
    try:
        types = resolve_variances(mixture.types, mixture.pricing)
        rows = price_table(types, mixture.pricing, active_cores=mixture.active_cores)
        savings = labeling_savings(types, mixture.pricing)
        variance = mixture_variance(types)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    header = ["label", "mix_weight", "mean_size", "variance", "hourly_price"]
    paths = [
        _write_csv(args.out / "prices.csv", header, [[row[h] for h in header] for row in rows]),
        _write_json(
            args.out / "summary.json",
            {"labeling_savings_per_hour": savings, "mixture_variance": variance, "types": len(mixture.types)},
        ),
    ]
    return config_digest(mixture.model_dump(mode="json")), None, paths


def cmd_fit(args: argparse.Namespace) -> tuple[str, Optional[int], list[Path]]:
    events = read_trace_csv(args.trace)
    trace_length = args.trace_length if args.trace_length is not None else max(e.time for e in events)
    seed = 0 if args.seed is None else args.seed
    cfg = validate_document(
        FitConfig,
        {
            "method": args.method,
            "P1": args.p1,
            "P2": args.p2,
            "trace_length": trace_length,
            "shutdown_min_cores": args.shutdown_min_cores,
            "include_pre_trace": args.include_pre_trace,
            "nu_scale": args.nu_scale,
            "size_statistic": args.size_statistic,
            "seed": seed,
        },
        source="fit options",
    )
    if args.p1_grid or args.p2_grid:
        model, report = calibrate_P1_P2(events, cfg, args.p1_grid or [cfg.P1], args.p2_grid or [cfg.P2])
    else:
        model, report = fit_trace(events, cfg)

    model_path = args.out_model if args.out_model is not None else args.out / "population.json"
    paths = [
        dump_model(model, model_path),
        _write_json(args.out / "fit_report.json", report.to_record()),
        _write_csv(
            args.out / "size_cdf.csv",
            ["size", "empirical_cdf", "synthetic_cdf", "empirical_core_share", "synthetic_core_share"],
            [[repr(v) for v in row] for row in report.size_cdf_rows()],
        ),
    ]
    log_event("fit_report", fields=report.to_record(), log_root=args.log_dir)
    return config_digest(cfg.model_dump(mode="json")), seed, paths


def cmd_import_azure(args: argparse.Namespace) -> tuple[str, Optional[int], list[Path]]:
    vms = read_azure_vm_table(args.vmtable, unit=args.unit)
    trace_end = None if args.trace_length is None else args.trace_length * SECONDS_PER_HOUR
    try:
        events, stats = vm_table_to_events(vms, trace_end_seconds=trace_end)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    paths = [write_trace_csv(events, args.out / "trace.csv"), _write_json(args.out / "import_stats.json", asdict(stats))]
    digest = config_digest({"vmtable": str(args.vmtable), "unit": args.unit, "trace_end_seconds": trace_end})
    return digest, None, paths


def cmd_generate_trace(args: argparse.Namespace) -> tuple[str, Optional[int], list[Path]]:
    model = load_population(args.config)
    seed = 0 if args.seed is None else args.seed
    events = generate_trace(model, args.arrival_rate, args.trace_length, np.random.default_rng(seed))
    path = write_trace_csv(events, args.out / "trace.csv")
    return config_digest(model.model_dump(mode="json")), seed, [path]


COMMANDS = {
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "fit": cmd_fit,
    "sweep-info": cmd_sweep_info,
    "moments": cmd_moments,
    "price": cmd_price,
    "generate-trace": cmd_generate_trace,
    "upper-bound": cmd_upper_bound,
    "import-azure": cmd_import_azure,
}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cluster-admission", description="Cluster admission control simulation, calibration and fitting"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--debug", action="store_true", help="Verbose logging")
    parser.add_argument("--log-dir", type=Path, default=None, help="Log directory (default: ./logs or $CLUSTER_ADMISSION_LOG_DIR)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, *, config_required: bool = True) -> None:
        p.add_argument("--config", type=Path, required=config_required, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="Override the config seed")
        p.add_argument("--out", type=Path, default=Path("results"), help="Output directory")

    def runs(p: argparse.ArgumentParser) -> None:
        p.add_argument("--reps", type=int, default=None, help="Override the number of replications")
        p.add_argument("--parallel", type=int, default=1, help="Worker processes for replications")

    p = sub.add_parser("simulate", help="Run replications of one configuration")
    common(p)
    runs(p)
    p.add_argument("--event-log", action="store_true", help="Write events.csv")
    p.add_argument("--decisions", action="store_true", help="Write decisions.jsonl")

    p = sub.add_parser("upper-bound", help="Utilization when every deployment that fits is admitted")
    common(p)
    runs(p)

    p = sub.add_parser("calibrate", help="Binary search for the largest threshold meeting the SLA")
    common(p)
    runs(p)
    p.add_argument("--policy", choices=("zeroth", "first", "second"), default=None)
    p.add_argument("--lower", type=float, default=None)
    p.add_argument("--upper", type=float, default=None)
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--sla-tau", type=float, default=None)

    p = sub.add_parser("sweep-info", help="Utilization against the information level per policy")
    common(p)
    runs(p)
    p.add_argument("--levels", type=_parse_ints, default=[0, 1, 5, 50])
    p.add_argument("--policies", type=lambda s: [x.strip() for x in s.split(",") if x.strip()], default=["zeroth", "first", "second"])
    p.add_argument("--calibrate", action="store_true", help="Calibrate the threshold for every (policy, level)")
    p.add_argument("--t-bounds", type=_parse_floats, default=None, help="lower,upper for core thresholds")
    p.add_argument("--rho-bounds", type=_parse_floats, default=[1e-4, 0.5], help="lower,upper for rho")

    p = sub.add_parser("moments", help="Dump the moment profile of one deployment")
    common(p, config_required=False)
    p.add_argument("--belief", type=Path, default=None, help="Belief JSON (as written to belief.json) instead of the prior")
    p.add_argument("--cores", type=int, default=None, help="Live cores (default: from --belief, else 1)")
    p.add_argument("--info-level", type=int, default=0)

    p = sub.add_parser("price", help="Hourly prices per label and for the mixture")
    common(p)

    p = sub.add_parser("fit", help="Fit a population model to a trace CSV")
    common(p, config_required=False)
    p.add_argument("--trace", type=Path, required=True)
    p.add_argument("--out-model", type=Path, default=None)
    p.add_argument("--trace-length", type=float, default=None, help="Hours (default: last event time)")
    p.add_argument("--p1", type=float, default=0.5)
    p.add_argument("--p2", type=float, default=0.5)
    p.add_argument("--p1-grid", type=_parse_floats, default=None)
    p.add_argument("--p2-grid", type=_parse_floats, default=None)
    p.add_argument("--nu-scale", choices=("log", "linear"), default="linear")
    p.add_argument("--size-statistic", choices=("peak", "final", "total"), default="peak")
    p.add_argument("--method", choices=("marginal", "point"), default="marginal")
    p.add_argument("--shutdown-min-cores", type=int, default=2, help="Cores that must stop together for a shutdown")
    p.add_argument("--include-pre-trace", action="store_true", help="Keep deployments already running at time 0")

    p = sub.add_parser("import-azure", help="Convert an Azure VM table into a trace CSV")
    p.add_argument("--vmtable", type=Path, required=True, help="vmtable.csv, times in seconds")
    p.add_argument("--out", type=Path, default=Path("results"), help="Output directory")
    p.add_argument("--unit", choices=("vm", "cores"), default="vm", help="Count VMs or their cores")
    p.add_argument("--trace-length", type=float, default=None, help="Hours (default: last deletion)")

    p = sub.add_parser("generate-trace", help="Write a synthetic trace from a population model")
    common(p)
    p.add_argument("--arrival-rate", type=float, default=1.0, help="Deployments per hour")
    p.add_argument("--trace-length", type=float, default=720.0, help="Hours")

    return parser


def _check_args(args: argparse.Namespace) -> None:
    if getattr(args, "parallel", 1) < 1:
        raise ConfigError("--parallel must be >= 1")
    if args.command == "moments":
        if args.config is None and args.belief is None:
            raise ConfigError("moments needs --config or --belief")
        if args.belief is not None and args.info_level:
            raise ConfigError("--info-level samples a new belief and cannot be combined with --belief")
        if (args.cores is not None and args.cores < 1) or args.info_level < 0:
            raise ConfigError("--cores must be >= 1 and --info-level >= 0")
    if args.command == "sweep-info":
        unknown = [k for k in args.policies if k not in ("zeroth", "first", "second")]
        if unknown:
            raise ConfigError(f"unknown policies: {', '.join(unknown)}")
        if args.calibrate:
            if args.t_bounds is None and any(k != "second" for k in args.policies):
                raise ConfigError("--calibrate needs --t-bounds for zeroth/first policies")
            for name in ("t_bounds", "rho_bounds"):
                bounds = getattr(args, name)
                if bounds is not None and len(bounds) != 2:
                    raise ConfigError(f"--{name.replace('_', '-')} takes exactly two values")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    log_dir = configure_logging(args.log_dir, debug=args.debug)
    args.log_dir = log_dir

    started = time.monotonic()
    manifest = RunManifest(
        command=args.command,
        config_digest="",
        seed=None,
        code_version=__version__,
        started_at=datetime.now(timezone.utc).isoformat(),
    )
    try:
        _check_args(args)
        digest, seed, paths = COMMANDS[args.command](args)
    except AdmissionError as exc:
        logger.error(str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception:
        logger.exception(f"Command '{args.command}' failed")
        return 1

    manifest.config_digest = digest
    manifest.seed = seed
    manifest.outputs = [str(p) for p in paths]
    manifest.elapsed_seconds = round(time.monotonic() - started, 3)
    _write_json(args.out / "manifest.json", asdict(manifest))
    log_event("run_manifest", fields=asdict(manifest), log_root=log_dir)
    logger.info(f"{args.command} finished in {manifest.elapsed_seconds}s; outputs in {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
