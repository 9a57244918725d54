import math

import numpy as np
import pytest
from scipy import stats

from qpburst.datasets import published_runs, source_rates
from qpburst.errors import DegeneracyError, DomainError
from qpburst.rates import (FitResult, available_time, efficiency_fit, efficiency_from_tables,
                           effective_t1, event_rate, impact_probability, live_time,
                           make_run_result, rate_vs_period_fit, sampling_period_correction,
                           weighted_linear_fit)


def test_event_rate_examples():
    r, e, ul = event_rate(5, 12597.6)
    assert (round(r * 1e3, 2), round(e * 1e3, 2)) == (0.40, 0.18)
    assert ul is None
    assert event_rate(100, 1000) == pytest.approx((0.1, 0.01, None))
    r, e, ul = event_rate(0, 1000)
    assert (r, e) == (0.0, 0.0)
    assert ul == pytest.approx(stats.chi2.ppf(0.9, 2) / 2 / 1000, rel=1e-12)
    assert ul == pytest.approx(2.3e-3, abs=5e-6)
    with pytest.raises(DomainError):
        event_rate(3, 0)


def test_run_result_live_time():
    res = make_run_result("x", 5, 171, 73.6)
    assert res.live_time == pytest.approx(171 * 1e6 * 73.6e-6)
    assert res.rate_err == pytest.approx(math.sqrt(5) / res.live_time)
    assert res.live_time <= make_run_result("x", 5, 171, 73.6, acquisition_traces=600).acquisition_time
    assert live_time(2, 50.0) == pytest.approx(100.0)


def test_error_scaling_with_live_time():
    # doubling live time at fixed rate shrinks sigma by sqrt(2) on average
    rng = np.random.default_rng(11)
    rate, t = 0.05, 2000.0
    ratios = []
    for _ in range(100):
        e1 = event_rate(rng.poisson(rate * t), t)[1]
        e2 = event_rate(rng.poisson(rate * 2 * t), 2 * t)[1]
        ratios.append(e1 / e2)
    assert np.mean(ratios) == pytest.approx(math.sqrt(2), rel=0.03)


def test_fit_noiseless_line():
    x = np.arange(5.0)
    f = weighted_linear_fit(zip(x, 2 * x + 1, np.ones(5)))
    assert f.p1 == pytest.approx(2, abs=1e-12) and f.p0 == pytest.approx(1, abs=1e-12)
    assert f.chi2 == pytest.approx(0, abs=1e-20) and f.dof == 3


def test_fit_two_points():
    f = weighted_linear_fit([(1, 3, 0.1), (4, -2, 0.5)])
    assert f(1) == pytest.approx(3) and f(4) == pytest.approx(-2)
    assert f.chi2 == pytest.approx(0, abs=1e-20) and f.dof == 0


def test_fit_matches_weighted_lstsq():
    rng = np.random.default_rng(3)
    x = rng.uniform(0, 10, 30)
    s = rng.uniform(0.5, 2, 30)
    y = 0.7 * x - 2 + rng.normal(0, s)
    f = weighted_linear_fit(zip(x, y, s))
    A = np.column_stack([np.ones_like(x), x]) / s[:, None]
    coef, *_ = np.linalg.lstsq(A, y / s, rcond=None)
    cov = np.linalg.inv(A.T @ A)
    assert (f.p0, f.p1) == pytest.approx(tuple(coef), rel=1e-9)
    assert (f.p0_err, f.p1_err) == pytest.approx(tuple(np.sqrt(np.diag(cov))), rel=1e-9)
    # polyfit agrees as well (it weights by 1/sigma)
    assert np.polyfit(x, y, 1, w=1 / s) == pytest.approx([f.p1, f.p0], rel=1e-9)


def test_fit_equal_errors_is_ols():
    rng = np.random.default_rng(4)
    x = rng.uniform(0, 5, 20)
    y = 3 * x + rng.normal(size=20)
    f = weighted_linear_fit(zip(x, y, np.full(20, 0.3)))
    ols = stats.linregress(x, y)
    assert f.p1 == pytest.approx(ols.slope, rel=1e-9)
    assert f.p0 == pytest.approx(ols.intercept, rel=1e-9)


def test_fit_residuals_orthogonal():
    rng = np.random.default_rng(5)
    x = rng.uniform(0, 5, 25)
    s = rng.uniform(0.1, 1, 25)
    y = x ** 1.5 + rng.normal(0, s)
    f = weighted_linear_fit(zip(x, y, s))
    w = 1 / s ** 2
    res = y - f(x)
    scale = np.sum(w * np.abs(y)) * np.max(x)
    assert abs(np.sum(w * res)) <= 1e-9 * scale
    assert abs(np.sum(w * x * res)) <= 1e-9 * scale


def test_fit_degenerate_and_invalid():
    with pytest.raises(DegeneracyError):
        weighted_linear_fit([(2, 1, 1), (2, 3, 1), (2, 5, 1)])
    with pytest.raises(DomainError):
        weighted_linear_fit([(1, 1, 1)])
    with pytest.raises(DomainError):
        weighted_linear_fit([(1, 1, 0), (2, 2, 1)])
    f = weighted_linear_fit([(2, 4, 1)], fix_intercept_zero=True)
    assert f.p1 == 2 and f.dof == 0


def test_through_origin_fit():
    rng = np.random.default_rng(6)
    x = np.linspace(1, 10, 12)
    s = 0.1 + 0.05 * x
    y = 0.08 * x + rng.normal(0, s)
    f = weighted_linear_fit(zip(x, y, s), fix_intercept_zero=True)
    coef, *_ = np.linalg.lstsq((x / s)[:, None], y / s, rcond=None)
    assert f.p1 == pytest.approx(coef[0], rel=1e-12)
    assert f.p0 == 0 and f.fixed_intercept


def test_correction_examples():
    model = weighted_linear_fit([(40, 9.08e-3, 1e-3), (74, 4.68e-3, 1e-3)])
    assert sampling_period_correction(1.0, 0.1, 50, 50, model) == (1.0, 0.1)
    r, e = sampling_period_correction(1.0, 0.1, 67.6, 73.6, model)
    # linear interpolation gives a 14.1% reduction
    assert 0.10 <= 1 - r <= 0.15
    assert e / r == pytest.approx(0.1)
    flat = FitResult(0.0, 0.0, 5.0, 0.1, 0.0, 1, x_min=0, x_max=100)
    assert sampling_period_correction(2.0, 0.2, 10, 90, flat) == (2.0, 0.2)
    with pytest.raises(DomainError):
        sampling_period_correction(1.0, 0.1, 20, 73.6, model)
    neg = FitResult(-1.0, 0.0, 10.0, 0.0, 0.0, 0, x_min=0, x_max=100)
    with pytest.raises(DomainError):
        sampling_period_correction(1.0, 0.1, 50, 10, neg)


def test_efficiency_from_published_tables():
    runs = published_runs()
    fit, model, corrected = efficiency_from_tables(runs, source_rates())
    # the correction model is the weighted fit of the FNAL per-period averages
    assert model.p1 < 0
    assert model == rate_vs_period_fit([r for r in runs if r.site == "FNAL"])
    # oracle: weighted through-origin least squares on the corrected rates
    exp = np.array([s.rate for s in sorted(source_rates(), key=lambda s: s.activity)])
    y = np.array([c[0] for c in corrected])
    s = np.array([c[1] for c in corrected])
    coef, *_ = np.linalg.lstsq((exp / s)[:, None], y / s, rcond=None)
    assert fit.p1 == pytest.approx(coef[0], rel=1e-12)
    # band around the published (8.0 +- 0.7)%
    assert 0.065 <= fit.p1 <= 0.095
    # without the sampling-period correction the slope is near 0.080
    raw = efficiency_fit([(r.rate, r.rate_err) for r in sorted(
        (r for r in runs if r.activity), key=lambda r: r.activity)], exp)
    assert raw.p1 == pytest.approx(0.080, abs=0.007)
    assert fit.p1 < raw.p1


def test_effective_t1():
    n = 1_000_000
    bits = np.zeros(n, np.uint8)
    bits[:round(n / math.e)] = 1
    assert effective_t1(bits, 5.0) == pytest.approx(5.0, rel=1e-5)
    bits = np.zeros(10_000, np.uint8)
    bits[:9394] = 1
    assert effective_t1(bits, 5.0) == pytest.approx(80, abs=0.1)
    with pytest.raises(DomainError):
        effective_t1(np.ones(10, np.uint8), 5.0)
    with pytest.raises(DomainError):
        effective_t1(np.zeros(10, np.uint8), 5.0)


def test_impact_probability_examples():
    assert available_time(4e-3, 1e-3) == pytest.approx(0.250, rel=0.02)
    assert impact_probability(0.0, 123.0) == 0.0
    assert impact_probability(0.042, 0.17) == pytest.approx(7.1e-3, abs=5e-5)
    assert available_time(0.0, 1e-3) == math.inf
    with pytest.raises(DomainError):
        available_time(0.01, 1.0)


@pytest.mark.parametrize("r", [1e-4, 4e-3, 0.042, 3.0])
@pytest.mark.parametrize("p", [1e-6, 1e-3, 0.01, 0.5])
def test_impact_round_trip(r, p):
    assert impact_probability(r, available_time(r, p)) == pytest.approx(p, rel=1e-12)
