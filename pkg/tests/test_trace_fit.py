"""Tests for fitting a population model to a workload trace."""
from __future__ import annotations

import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.special import gammaln
from scipy.stats import nbinom

from cluster_admission.errors import DegenerateSampleError, TraceFormatError
from cluster_admission.population import DeploymentParams, GammaParams, PopulationModel
from cluster_admission.trace_fit import (
    DeploymentFit,
    ExposureTable,
    FitConfig,
    TraceEvent,
    calibrate_P1_P2,
    cramer_von_mises,
    fit_delta,
    fit_deployment,
    fit_gamma_mle,
    fit_lifetime_prior,
    fit_marginal,
    fit_nu,
    fit_population,
    fit_sigma_prior,
    fit_trace,
    gamma_poisson_loglik,
    generate_trace,
    observe_deployment,
    group_by_deployment,
    read_trace_csv,
    simulate_deployment_events,
    size_cdfs,
    synthetic_sizes,
    write_trace_csv,
)

# Short-lived deployments so synthetic traces stay small.
TAME = PopulationModel(
    lambda_prior=GammaParams(4.0, 8.0),
    sigma_prior=GammaParams(4.0, 2.0),
    mu_prior=GammaParams(4.0, 4.0),
    delta=0.2,
    nu=0.5,
)


def ev(kind, time, cores=1, dep="a"):
    return TraceEvent(dep, kind, time, cores)


def write_text(tmp_path, text):
    path = tmp_path / "trace.csv"
    path.write_text(text, encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def test_csv_round_trip(tmp_path):
    events = [ev("deploy", 0.0, 3), ev("scaleout", 1.5, 2), ev("core_stop", 2.25), ev("end_of_trace", 4.0, 4)]
    path = write_trace_csv(events, tmp_path / "t.csv")
    assert read_trace_csv(path) == events


def test_csv_reports_line_numbers(tmp_path):
    path = write_text(
        tmp_path,
        "deployment_id,event,time_hours,cores\n" "a,deploy,0.0,2\n" "a,core_stop,soon,1\n",
    )
    with pytest.raises(TraceFormatError) as excinfo:
        read_trace_csv(path)
    assert excinfo.value.line == 3
    assert "line 3" in str(excinfo.value)


@pytest.mark.parametrize(
    "body",
    [
        "a,scaleout,1.0,2\n",
        "a,deploy,0.0,2\na,deploy,1.0,2\n",
        "a,vanish,1.0,1\n",
        "a,deploy,-1.0,2\n",
        "a,deploy,0.0,0\n",
        "a,deploy,0.0\n",
    ],
)
def test_csv_rejects_malformed_rows(tmp_path, body):
    path = write_text(tmp_path, "deployment_id,event,time_hours,cores\n" + body)
    with pytest.raises(TraceFormatError):
        read_trace_csv(path)


def test_csv_rejects_bad_header_and_empty(tmp_path):
    with pytest.raises(TraceFormatError):
        read_trace_csv(write_text(tmp_path, "id,kind,t,n\na,deploy,0,1\n"))
    with pytest.raises(TraceFormatError):
        read_trace_csv(write_text(tmp_path, "deployment_id,event,time_hours,cores\n"))


def test_group_by_deployment():
    groups = group_by_deployment([ev("deploy", 0.0, dep="a"), ev("deploy", 1.0, dep="b"), ev("core_stop", 2.0, dep="a")])
    assert [e.event for e in groups["a"]] == ["deploy", "core_stop"]
    assert len(groups["b"]) == 1


# ---------------------------------------------------------------------------
# Per-deployment fits
# ---------------------------------------------------------------------------


def test_censored_core_death_rate():
    cfg = FitConfig(trace_length=3.0)
    fit = fit_deployment([ev("deploy", 0.0, 3), ev("core_stop", 1.0), ev("core_stop", 2.0)], cfg)
    # Lifetimes 1 and 2 observed, one core censored at 3.
    assert fit.core_death_rate == pytest.approx(2.0 / 6.0)
    assert not fit.death_imputed
    assert fit.scaleout_imputed
    assert fit.scaleout_rate == pytest.approx(math.log(2) / 3.0)


def test_scaleout_rate_and_imputed_size():
    cfg = FitConfig(trace_length=2.0)
    events = [ev("deploy", 0.0, 1)] + [ev("scaleout", t, 1) for t in (0.5, 1.0, 1.5, 2.0)]
    fit = fit_deployment(events, cfg)
    assert fit.scaleout_rate == pytest.approx(2.0)
    assert fit.size_imputed
    assert fit.mean_extra_size == pytest.approx(math.log(2) / 5)
    assert fit.death_imputed
    assert fit.core_death_rate == pytest.approx(math.log(2) / 5.0)


def test_imputation_uses_P1():
    cfg = FitConfig(trace_length=10.0, P1=0.25)
    fit = fit_deployment([ev("deploy", 0.0, 2), ev("end_of_trace", 4.0, 2)], cfg)
    assert fit.scaleout_rate == pytest.approx(-math.log(0.25) / 4.0)
    assert fit.observed_time == pytest.approx(4.0)


def test_mean_extra_size_from_observed_sizes():
    cfg = FitConfig(trace_length=5.0)
    fit = fit_deployment([ev("deploy", 0.0, 3), ev("scaleout", 1.0, 1), ev("scaleout", 2.0, 5)], cfg)
    assert fit.mean_extra_size == pytest.approx((2 + 0 + 4) / 3)
    assert fit.peak_size == 9

    without_initial = fit_deployment(
        [ev("deploy", 0.0, 3), ev("scaleout", 1.0, 1), ev("scaleout", 2.0, 5)],
        cfg.model_copy(update={"include_initial_size": False}),
    )
    assert without_initial.mean_extra_size == pytest.approx(2.0)


def test_shutdown_detection():
    cfg = FitConfig(trace_length=5.0)
    fit = fit_deployment([ev("deploy", 0.0, 4), ev("core_stop", 2.0, 4)], cfg)
    assert fit.shut_down
    assert fit.death_imputed
    assert fit.observed_time == pytest.approx(2.0)

    pair = fit_deployment([ev("deploy", 0.0, 2), ev("core_stop", 2.0, 2)], cfg)
    assert pair.shut_down

    coarse = cfg.model_copy(update={"shutdown_min_cores": 3})
    small = fit_deployment([ev("deploy", 0.0, 2), ev("core_stop", 2.0, 2)], coarse)
    assert not small.shut_down
    assert small.core_death_rate == pytest.approx(2.0 / 4.0)


def test_zero_lifetime_deployment_is_degenerate():
    with pytest.raises(DegenerateSampleError):
        fit_deployment([ev("deploy", 1.0, 1), ev("core_stop", 1.0)], FitConfig(trace_length=5.0))


def test_fit_config_validation():
    with pytest.raises(ValidationError):
        FitConfig(trace_length=1.0, P1=1.0)
    with pytest.raises(ValidationError):
        FitConfig(trace_length=0.0)
    with pytest.raises(ValidationError):
        FitConfig(trace_length=1.0, nu_bounds=(1.0, -1.0))


# ---------------------------------------------------------------------------
# Population level
# ---------------------------------------------------------------------------


def test_gamma_mle_recovers_parameters():
    samples = np.random.default_rng(8).gamma(0.3107, 1.0 / 0.5778, size=30_000)
    fitted = fit_gamma_mle(samples)
    assert fitted.shape == pytest.approx(0.3107, rel=0.1)
    assert fitted.rate == pytest.approx(0.5778, rel=0.1)


def test_gamma_mle_degenerate_samples():
    with pytest.raises(DegenerateSampleError):
        fit_gamma_mle([2.0, 2.0])
    with pytest.raises(DegenerateSampleError):
        fit_gamma_mle([2.0])
    with pytest.raises(ValueError):
        fit_gamma_mle([1.0, -1.0])


def _fits_with_power_law(nu, n=3000, seed=0):
    rng = np.random.default_rng(seed)
    mu = rng.gamma(2.0, 0.5, size=n)
    lam = rng.gamma(5.0, 0.2, size=n)
    return [
        DeploymentFit(
            deployment_id=f"d{i}",
            scaleout_rate=float(lam[i] * mu[i] ** nu),
            mean_extra_size=float(1 + i % 7),
            core_death_rate=float(mu[i]),
            observed_time=10.0,
            shut_down=False,
            peak_size=3,
        )
        for i in range(n)
    ]


@pytest.mark.parametrize("nu", [0.673, 0.0])
def test_fit_nu_recovers_exponent(nu):
    assert fit_nu(_fits_with_power_law(nu), scale="log") == pytest.approx(nu, abs=0.1)


@pytest.mark.parametrize("nu", [0.673, 0.2])
def test_fit_nu_linear_scale_recovers_exponent(nu):
    fits = _fits_with_power_law(nu)
    assert fit_nu(fits, scale="linear") == pytest.approx(nu, abs=0.15)


def test_fit_nu_needs_two_deployments():
    assert fit_nu(_fits_with_power_law(0.5, n=1)) == 0.0


def test_fit_delta_examples():
    assert fit_delta([1.0], [True]) == pytest.approx(1.0)
    assert fit_delta([1.0, 2.0], [False, False]) == 0.0
    assert fit_delta([1.0, 2.0, 3.0], [True, False, True]) == pytest.approx(2.0 / 6.0)
    with pytest.raises(ValueError):
        fit_delta([1.0], [True, False])


def test_fit_population_skips_deployments_without_deaths():
    fits = _fits_with_power_law(0.5, n=50)
    imputed = DeploymentFit("x", 1e6, 1.0, 1e-9, 1.0, False, 1, death_imputed=True)
    model = fit_population(fits + [imputed], 0.5, delta=0.1)
    reference = fit_population(fits, 0.5, delta=0.1)
    assert model.mu_prior == reference.mu_prior
    assert model.lambda_prior == reference.lambda_prior
    assert model.delta == 0.1


def test_cramer_von_mises():
    a = np.array([1, 2, 2, 3, 5, 8])
    b = np.array([1, 1, 4, 6, 9])
    assert cramer_von_mises(a, a) == 0.0
    d = cramer_von_mises(a, b)
    assert 0.0 < d <= 1.0
    assert cramer_von_mises(10 * a + 3, 10 * b + 3) == pytest.approx(d)
    with pytest.raises(ValueError):
        cramer_von_mises([], b)


# ---------------------------------------------------------------------------
# Synthetic traces and the full pipeline
# ---------------------------------------------------------------------------


def test_simulated_deployment_events_are_well_formed():
    rng = np.random.default_rng(4)
    for i in range(200):
        params = DeploymentParams(lambda_norm=0.5, sigma=2.0, mu=1.0)
        events = simulate_deployment_events(params, TAME, 10.0, 30.0, rng, f"d{i}")
        assert events[0].event == "deploy"
        live = 0
        for e in events:
            assert 10.0 <= e.time <= 30.0
            if e.event in ("deploy", "scaleout"):
                live += e.cores
            elif e.event == "core_stop":
                live -= e.cores
            assert live >= 0
        if events[-1].event == "end_of_trace":
            assert events[-1].cores == live > 0
        else:
            assert live == 0


def test_generate_trace_ids_and_order():
    events = generate_trace(TAME, 1.0, 50.0, np.random.default_rng(1))
    times = [e.time for e in events]
    assert times == sorted(times)
    assert all(e.deployment_id.startswith("d") and len(e.deployment_id) == 7 for e in events)
    with pytest.raises(ValueError):
        generate_trace(TAME, 0.0, 50.0, np.random.default_rng(1))


def test_fit_trace_pipeline(tmp_path):
    events = generate_trace(TAME, 2.0, 500.0, np.random.default_rng(2))
    path = write_trace_csv(events, tmp_path / "trace.csv")
    cfg = FitConfig(trace_length=500.0, seed=5)
    model, report = fit_trace(read_trace_csv(path), cfg)
    assert isinstance(model, PopulationModel)
    assert report.n_fitted + report.n_skipped + report.n_pre_trace == report.n_deployments
    assert report.method == "marginal"
    assert report.n_deployments == len(group_by_deployment(events))
    assert 0.0 <= report.cvm_distance <= 1.0
    assert report.shutdowns > 0 and model.delta > 0
    assert report.to_record()["mu_prior"] == model.mu_prior.to_dict()


def test_size_statistics():
    events = [
        ev("deploy", 0.0, 3),
        ev("scaleout", 1.0, 1),
        ev("core_stop", 1.5, 2),
        ev("scaleout", 2.0, 5),
        ev("core_stop", 3.0, 1),
        ev("end_of_trace", 5.0, 6),
    ]
    obs = observe_deployment(events, FitConfig(trace_length=5.0))
    assert (obs.size("peak"), obs.size("final"), obs.size("total")) == (7, 6, 9)
    assert obs.core_deaths == 3


def test_synthetic_sizes_are_ordered():
    windows = [(0.0, 20.0)] * 300
    by_stat = {
        stat: synthetic_sizes(TAME, windows, np.random.default_rng(8), statistic=stat)
        for stat in ("peak", "final", "total")
    }
    assert np.all(by_stat["final"] <= by_stat["peak"])
    assert np.all(by_stat["peak"] <= by_stat["total"])
    assert np.all(by_stat["peak"] >= 1)

    events = generate_trace(TAME, 1.0, 200.0, np.random.default_rng(6))
    _, report = fit_trace(events, FitConfig(trace_length=200.0, size_statistic="total"))
    assert 0.0 <= report.cvm_distance <= 1.0
    with pytest.raises(ValidationError):
        FitConfig(trace_length=1.0, size_statistic="median")


def test_calibrate_P1_P2_picks_smallest_distance():
    events = generate_trace(TAME, 1.0, 300.0, np.random.default_rng(3))
    cfg = FitConfig(trace_length=300.0, seed=1)
    _, report = calibrate_P1_P2(events, cfg, [0.3, 0.7], [0.3, 0.7])
    assert len(report.calibration) == 4
    assert report.cvm_distance == min(row["cvm_distance"] for row in report.calibration)
    assert (report.P1, report.P2) in {(row["P1"], row["P2"]) for row in report.calibration}
    with pytest.raises(ValueError):
        calibrate_P1_P2(events, cfg, [], [0.5])


# ---------------------------------------------------------------------------
# Marginal likelihood fit
# ---------------------------------------------------------------------------


def test_last_single_core_stop_is_ambiguous():
    cfg = FitConfig(trace_length=10.0)
    lone = observe_deployment([ev("deploy", 0.0, 1), ev("core_stop", 2.0)], cfg)
    assert lone.ambiguous_end and not lone.shut_down
    assert lone.core_deaths == 1

    trailing = observe_deployment([ev("deploy", 0.0, 3), ev("core_stop", 1.0, 2), ev("core_stop", 4.0)], cfg)
    assert trailing.ambiguous_end
    assert trailing.core_deaths == 3
    assert trailing.core_exposure == pytest.approx(3.0 + 3.0)

    together = observe_deployment([ev("deploy", 0.0, 3), ev("core_stop", 1.0), ev("core_stop", 4.0, 2)], cfg)
    assert together.shut_down and not together.ambiguous_end
    assert together.core_deaths == 1

    censored = observe_deployment([ev("deploy", 0.0, 2), ev("core_stop", 1.0)], cfg)
    assert not censored.ambiguous_end and not censored.shut_down
    assert censored.observed_time == pytest.approx(10.0)
    assert censored.core_exposure == pytest.approx(2.0 + 9.0)

    single_core_shutdowns = cfg.model_copy(update={"shutdown_min_cores": 1})
    assert observe_deployment([ev("deploy", 0.0, 1), ev("core_stop", 2.0)], single_core_shutdowns).shut_down


def test_gamma_poisson_loglik_is_negative_binomial():
    counts = np.array([0.0, 1.0, 4.0, 9.0])
    exposure = np.array([0.5, 2.0, 3.0, 7.5])
    shape, rate = 1.7, 0.8
    ours = gamma_poisson_loglik(shape, rate, counts, exposure)
    reference = nbinom.logpmf(counts, shape, rate / (rate + exposure)) + gammaln(counts + 1) - counts * np.log(exposure)
    np.testing.assert_allclose(ours, reference, rtol=1e-10)


def _table(**columns) -> ExposureTable:
    n = len(next(iter(columns.values())))
    base = {name: np.zeros(n) for name in ExposureTable.__dataclass_fields__}
    base["ambiguous_ends"] = np.zeros(n, dtype=bool)
    base.update({name: np.asarray(value) for name, value in columns.items()})
    return ExposureTable(**base)


def test_fit_sigma_prior_recovers_mean_extra_size():
    rng = np.random.default_rng(12)
    sigma = rng.gamma(2.0, 1.0, size=4000)
    samples = rng.integers(1, 6, size=4000).astype(float)
    table = _table(observed_time=np.ones(4000), size_samples=samples, extra_cores=rng.poisson(sigma * samples))
    prior = fit_sigma_prior(table)
    assert prior.mean == pytest.approx(2.0, rel=0.05)
    assert prior.shape == pytest.approx(2.0, rel=0.25)


def test_fit_lifetime_prior_uses_censored_and_zero_death_deployments():
    rng = np.random.default_rng(13)
    n = 6000
    mu = rng.gamma(3.0, 1.0 / 3.0, size=n)
    # Observation ends at the shutdown or at the trace end, whichever comes first.
    shutdown_at = rng.exponential(1.0 / (0.3 * mu))
    planned = rng.uniform(0.5, 4.0, size=n)
    observed = np.minimum(shutdown_at, planned)
    shutdowns = (shutdown_at < planned).astype(float)
    core_hours = rng.integers(1, 4, size=n) * observed
    deaths = rng.poisson(mu * core_hours)
    table = _table(observed_time=observed, core_hours=core_hours, core_deaths=deaths.astype(float), shutdowns=shutdowns)
    assert (deaths == 0).sum() > 200
    prior, delta = fit_lifetime_prior(table)
    assert prior.mean == pytest.approx(1.0, rel=0.08)
    assert delta == pytest.approx(0.3, abs=0.08)

    with pytest.raises(DegenerateSampleError):
        fit_lifetime_prior(_table(observed_time=observed, core_hours=core_hours, core_deaths=np.zeros(n)))


def test_marginal_fit_recovers_population():
    truth = TAME
    events = generate_trace(truth, 10.0, 300.0, np.random.default_rng(21))
    model, report = fit_trace(events, FitConfig(trace_length=300.0, seed=4))
    assert report.method == "marginal"
    assert model.mu_prior.mean == pytest.approx(truth.mu_prior.mean, rel=0.15)
    assert model.sigma_prior.mean == pytest.approx(truth.sigma_prior.mean, rel=0.15)
    assert model.lambda_prior.mean == pytest.approx(truth.lambda_prior.mean, rel=0.25)
    assert model.delta == pytest.approx(truth.delta, abs=0.08)
    assert model.nu == pytest.approx(truth.nu, abs=0.35)
    assert report.ambiguous_ends > 0


def test_fit_marginal_keeps_zero_death_deployments():
    cfg = FitConfig(trace_length=300.0)
    events = generate_trace(TAME, 5.0, 300.0, np.random.default_rng(22))
    observations = [observe_deployment(evts, cfg) for evts in group_by_deployment(events).values()]
    assert any(o.core_deaths == 0 for o in observations)
    model = fit_marginal(observations, cfg)
    table = ExposureTable.from_observations(observations)
    assert len(table) == len(observations)
    assert model.mu_prior.mean > 0


# ---------------------------------------------------------------------------
# Pre-trace deployments and size CDFs
# ---------------------------------------------------------------------------


def _with_pre_trace(events, n):
    extra = []
    for i in range(n):
        extra += [ev("deploy", 0.0, 2, dep=f"p{i}"), ev("core_stop", 1.0 + i, 1, dep=f"p{i}")]
    return sorted(events + extra, key=lambda e: e.time)


def test_pre_trace_deployments_are_excluded_by_default():
    events = _with_pre_trace(generate_trace(TAME, 2.0, 200.0, np.random.default_rng(9)), 5)
    _, report = fit_trace(events, FitConfig(trace_length=200.0))
    assert report.n_pre_trace == 5
    assert report.n_deployments == len(group_by_deployment(events))
    assert report.n_fitted + report.n_skipped + report.n_pre_trace == report.n_deployments

    _, kept = fit_trace(events, FitConfig(trace_length=200.0, include_pre_trace=True))
    assert kept.n_pre_trace == 0
    assert kept.n_fitted == report.n_fitted + 5

    _, later_start = fit_trace(events, FitConfig(trace_length=200.0, trace_start=1e-9))
    assert later_start.n_pre_trace >= 5


def test_size_cdfs_examples():
    support, F_a, F_b = size_cdfs([1, 2, 2, 4], [2, 3])
    np.testing.assert_allclose(support, [1, 2, 3, 4])
    np.testing.assert_allclose(F_a, [0.25, 0.75, 0.75, 1.0])
    np.testing.assert_allclose(F_b, [0.0, 0.5, 1.0, 1.0])

    _, W_a, W_b = size_cdfs([1, 2, 2, 4], [2, 3], weighted=True)
    np.testing.assert_allclose(W_a, [1 / 9, 5 / 9, 5 / 9, 1.0])
    np.testing.assert_allclose(W_b, [0.0, 0.4, 1.0, 1.0])
    with pytest.raises(ValueError):
        size_cdfs([], [1])


def test_report_size_cdf_rows():
    events = generate_trace(TAME, 1.0, 200.0, np.random.default_rng(6))
    _, report = fit_trace(events, FitConfig(trace_length=200.0))
    rows = report.size_cdf_rows()
    sizes = [r[0] for r in rows]
    assert sizes == sorted(sizes) and sizes[0] >= 1
    for column in range(1, 5):
        values = [r[column] for r in rows]
        assert all(b >= a for a, b in zip(values, values[1:]))
        assert values[-1] == pytest.approx(1.0)
    assert "size_samples" not in report.to_record()
