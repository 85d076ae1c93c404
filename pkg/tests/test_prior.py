import math

import numpy as np
import pytest
from scipy import integrate, optimize, stats

from selfcount.domain.prior import (
    CalibrationError,
    EmpiricalPrior,
    FitError,
    PriorSpec,
    UniformPrior,
    build_prior,
    calibrate_lambda,
    derive_cell_max,
    empirical_loglog,
    fit_all,
    fit_mle,
    sample_prior,
    tail_cdf,
)


@pytest.mark.parametrize(
    "c_fmax, expected",
    [(3000, 3000 / 36), (36, 1.0), (12000, 12000 / 36)],
)
def test_derive_cell_max(c_fmax, expected):
    assert derive_cell_max(c_fmax, 3, 3, 4) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("args", [(0, 3, 3, 4), (100, 0, 3, 4), (100, 3, 3, 0)])
def test_derive_cell_max_rejects_zero(args):
    with pytest.raises(ValueError):
        derive_cell_max(*args)


def _trapezoid_lambda(alpha, c_max, s_images):
    """Independent calibration: trapezoid CDF on a dense log grid, brentq root."""
    grid = np.geomspace(1.0, 1e5, 400_001)

    def cdf(lam):
        dens = grid**-alpha * np.exp(-lam * grid)
        cum = np.concatenate(([0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))))
        return np.interp(c_max, grid, cum) / cum[-1]

    return optimize.brentq(lambda lam: cdf(lam) - (1 - 1 / s_images), 1e-4, 5.0)


def test_calibrate_lambda_matches_trapezoid_oracle():
    lam = calibrate_lambda(2.0, 3000 / 36, 300)
    assert lam == pytest.approx(_trapezoid_lambda(2.0, 3000 / 36, 300), rel=1e-3)


@pytest.mark.parametrize("alpha", [1.6, 1.8, 2.0, 2.2, 2.4])
@pytest.mark.parametrize("c_max", [5.0, 10.0, 20.0, 40.0, 83.33])
def test_calibration_residual(alpha, c_max):
    lam = calibrate_lambda(alpha, c_max, 1000)
    assert abs(tail_cdf(c_max, alpha, lam) - (1 - 1 / 1000)) < 1e-6


def test_lambda_monotone_on_grid():
    c_maxes = [5.0, 10.0, 20.0, 40.0, 83.33]
    sizes = [300, 500, 1000, 2000, 5000]
    table = np.array([[calibrate_lambda(2.0, c, s) for s in sizes] for c in c_maxes])
    # decreasing in c_max, increasing in S
    assert np.all(np.diff(table, axis=0) < 0)
    assert np.all(np.diff(table, axis=1) > 0)


def test_calibrate_lambda_rejects_bad_input():
    with pytest.raises(ValueError):
        calibrate_lambda(2.0, 20.0, 1)
    with pytest.raises(ValueError):
        calibrate_lambda(2.0, 1.0, 300)


def test_calibration_failure_carries_bracket(monkeypatch):
    monkeypatch.setattr("selfcount.domain.prior.tail_cdf", lambda c, a, lam: 0.0)
    with pytest.raises(CalibrationError) as info:
        calibrate_lambda(2.0, 20.0, 300)
    assert info.value.bracket[0] < info.value.bracket[1]


def test_cdf_table_invariants(prior_spec):
    grid, cdf = prior_spec.cdf_table
    assert cdf[0] == 0.0
    assert abs(cdf[-1] - 1.0) < 1e-9
    assert np.all(np.diff(cdf) >= 0)
    assert grid[-1] == pytest.approx(prior_spec.c_max_cell)


def test_spec_validation():
    with pytest.raises(ValueError):
        PriorSpec(alpha=2.0, lam=0.1, c_max_cell=20.0, head_mass_fraction=0.6)
    with pytest.raises(ValueError):
        PriorSpec(alpha=2.0, lam=0.1, c_max_cell=1.0)


def test_sample_prior_head_mass(prior_spec):
    samples = sample_prior(prior_spec, 100_000, seed=0)
    assert np.mean(samples.values < 1.0) == pytest.approx(0.30, abs=0.01)
    assert samples.values.min() >= 0.0
    assert samples.values.max() <= prior_spec.c_max_cell


def test_sample_prior_matches_analytic_cdf(prior_spec):
    samples = sample_prior(prior_spec, 100_000, seed=1).values
    statistic = stats.kstest(samples, prior_spec.cdf).statistic
    assert statistic < 0.01


def test_sample_mean_matches_numeric_mean(prior_spec):
    samples = sample_prior(prior_spec, 100_000, seed=2).values
    head = 0.5 * prior_spec.head_mass_fraction
    tail, _ = integrate.quad(
        lambda c: c * prior_spec.tail_pdf(c), prior_spec.head_quantile, prior_spec.c_max_cell
    )
    assert prior_spec.mean() == pytest.approx(head + tail, rel=1e-4)
    assert samples.mean() == pytest.approx(prior_spec.mean(), rel=0.02)


def test_sampling_is_reproducible(prior_spec):
    a = sample_prior(prior_spec, 50, seed=9).values
    b = sample_prior(prior_spec, 50, seed=9).values
    np.testing.assert_array_equal(a, b)


def test_sample_sizes(prior_spec):
    with pytest.raises(ValueError):
        sample_prior(prior_spec, 0, seed=0)
    one = sample_prior(prior_spec, 1, seed=0)
    assert len(one) == 1
    assert 0.0 <= one.values[0] <= prior_spec.c_max_cell


def test_quantile_inverts_cdf(prior_spec):
    levels = np.linspace(0.01, 0.99, 25)
    np.testing.assert_allclose(prior_spec.cdf(prior_spec.quantile(levels)), levels, atol=1e-4)


def _tail_samples(alpha, c_max, n, seed):
    spec = PriorSpec(
        alpha=alpha,
        lam=calibrate_lambda(alpha, c_max, 300),
        c_max_cell=c_max,
        head_mass_fraction=0.0,
    )
    return spec.draw(n, np.random.default_rng(seed))


def test_fit_mle_recovers_alpha():
    samples = _tail_samples(2.0, 3000 / 36, 10_000, seed=4)
    report = fit_mle(samples, "truncated-power-law")
    assert 1.85 <= report.params["alpha"] <= 2.15
    assert math.isfinite(report.log_likelihood)
    xs = [x for x, _ in report.loglog_curve]
    assert xs == sorted(xs)


def test_likelihood_ranking_on_power_law_data():
    ordered = 0
    for seed in range(20):
        samples = _tail_samples(2.0, 3000 / 36, 10_000, seed=100 + seed)
        loglik = {r.family: r.log_likelihood for r in fit_all(samples)}
        ordered += loglik["truncated-power-law"] >= loglik["lognormal"] >= loglik["pareto"]
    assert ordered >= 18


def test_fit_rejects_degenerate_samples():
    with pytest.raises(FitError):
        fit_mle(np.full(200, 3.0), "pareto")
    with pytest.raises(ValueError):
        fit_mle(np.linspace(1, 2, 50), "lognormal")
    with pytest.raises(ValueError):
        fit_mle(np.linspace(1, 2, 500), "gamma")


def test_empirical_loglog_sorted_and_finite(prior_spec):
    curve = empirical_loglog(sample_prior(prior_spec, 5000, seed=3).values)
    assert curve
    xs, ys = zip(*curve)
    assert list(xs) == sorted(xs)
    assert all(math.isfinite(y) for y in ys)


def test_build_prior_families(prior_spec):
    assert build_prior("truncated-power-law", prior_spec) is prior_spec
    uniform = build_prior("uniform", prior_spec)
    assert isinstance(uniform, UniformPrior)
    assert uniform.mean() == pytest.approx(prior_spec.c_max_cell / 2)
    empirical = build_prior("empirical", prior_spec, np.array([1.0, 2.0, 3.0]))
    assert isinstance(empirical, EmpiricalPrior)
    draws = empirical.draw(100, np.random.default_rng(0))
    assert set(np.unique(draws)) <= {1.0, 2.0, 3.0}
    with pytest.raises(ValueError):
        build_prior("empirical", prior_spec)
