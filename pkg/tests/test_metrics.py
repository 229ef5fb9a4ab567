import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from metareg.errors import DimensionMismatch, DomainError
from metareg.metrics import (
    ALPHA_FLOOR,
    POWER_CEILING,
    adjust_alpha,
    aggregate,
    bias_summary,
    confidence_interval,
    covered,
    discrepancy_grid,
    error_metric_family,
    power_at_discrepancy,
    power_curve,
    variance_summary,
)


def test_grid():
    g = discrepancy_grid()
    assert g.size == 100 and g[0] == 0.1 and g[-1] == 10.0
    np.testing.assert_allclose(np.diff(g), 0.1)


# ---------------------------------------------------------------- power


@pytest.mark.parametrize("d,se,df,alpha", [(0.1, 0.1, 20, 0.05), (0.3, 0.2, 5, 0.01), (1.0, 0.5, 100, 0.05)])
def test_power_matches_scipy_nct(d, se, df, alpha):
    c = stats.t.ppf(1 - alpha, df)
    power, miss = power_at_discrepancy(d, se, df, alpha)
    assert power == pytest.approx(stats.nct.sf(c, df, d / se), abs=1e-9)
    assert miss == pytest.approx(stats.nct.cdf(c, df, d / se), abs=1e-9)


def test_power_at_zero_discrepancy_is_alpha():
    power, _ = power_at_discrepancy(0.0, 0.3, 40, 0.05)
    assert power == pytest.approx(0.05, abs=1e-9)


def test_power_curve_shape_and_monotone():
    c = power_curve(0.2, 30, 0.05)
    assert c.power.shape == (100,) and c.miss.shape == (100,)
    assert np.all(np.diff(c.power) >= 0) and np.all(np.diff(c.miss) <= 0)
    assert c.power.max() <= POWER_CEILING
    assert c.at(0.1) == pytest.approx(stats.nct.sf(c.critical, 30, 0.5), abs=1e-9)
    with pytest.raises(DomainError):
        c.at(0.15)
    with pytest.raises(DomainError):
        c.at(10.1)


def test_power_saturates_beyond_supported_ncp():
    c = power_curve(0.01, 50, 0.05)
    # ncp = d / 0.01 passes 40 at d = 0.4
    assert np.all(c.power[c.discrepancy > 0.4] == POWER_CEILING)
    assert np.all(c.miss[c.discrepancy > 0.4] == 0.0)
    assert c.miss_at(0.3) > 0


@given(st.floats(0.01, 2.0), st.floats(0.01, 2.0), st.integers(2, 500))
def test_smaller_se_more_power(se1, se2, df):
    lo, hi = sorted((se1, se2))
    a, b = power_curve(lo, df, 0.05), power_curve(hi, df, 0.05)
    assert np.all(a.power >= b.power - 1e-12)


@given(st.floats(0.05, 1.0), st.integers(2, 200))
def test_larger_alpha_more_power(se, df):
    a, b = power_curve(se, df, 0.10), power_curve(se, df, 0.01)
    assert np.all(a.power >= b.power - 1e-12)


def test_power_domain():
    with pytest.raises(DomainError):
        power_curve(0.0, 10, 0.05)
    with pytest.raises(DomainError):
        power_curve(0.1, 0, 0.05)


@pytest.mark.parametrize(
    "total,expected",
    [(1250, 0.05), (500, 0.05), (5000, 0.025), (1250 * 100, 0.005)],
)
def test_adjust_alpha(total, expected):
    assert adjust_alpha(total, 0.05) == pytest.approx(expected, rel=1e-12)


def test_adjust_alpha_floor_and_domain():
    assert adjust_alpha(10**15, 0.05) == ALPHA_FLOOR
    with pytest.raises(DomainError):
        adjust_alpha(0, 0.05)


@given(st.integers(1, 10**7), st.integers(1, 10**7))
def test_adjust_alpha_nonincreasing(a, b):
    lo, hi = sorted((a, b))
    assert adjust_alpha(hi, 0.05) <= adjust_alpha(lo, 0.05)


# ---------------------------------------------------------------- bias, variance, errors


def test_bias_and_variance_by_hand():
    est = np.array([0.4, 0.6, 0.8])
    mean_bias, per = bias_summary(est, 0.5)
    assert mean_bias[0] == pytest.approx(0.1)
    np.testing.assert_allclose(per[:, 0], [-0.1, 0.1, 0.3])
    emp, scaled = variance_summary(est, [0.1, 0.2, 0.3], n_per_study=10)
    assert emp[0] == pytest.approx(np.var(est))
    assert scaled[0] == pytest.approx(10 * (0.01 + 0.04 + 0.09) / 3)


def test_error_metric_family_by_hand():
    m = error_metric_family([[1.0, 0.1], [3.0, -0.1]], [2.0, 0.0])
    assert m.mse[0] == pytest.approx(1.0) and m.mae[0] == pytest.approx(1.0)
    assert m.mpe[0] == pytest.approx(0.0) and m.mape[0] == pytest.approx(0.5)
    assert np.isnan(m.mpe[1]) and np.isnan(m.mape[1])
    np.testing.assert_array_equal(m.undefined_percent, [False, True])


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=50), st.floats(-5, 5))
def test_mse_decomposition(values, truth):
    est = np.array(values)
    m = error_metric_family(est, truth)
    bias, _ = bias_summary(est, truth)
    emp, _ = variance_summary(est, np.ones_like(est), 1)
    assert m.mse[0] == pytest.approx(emp[0] + bias[0] ** 2, rel=1e-9, abs=1e-9)


def test_shape_errors():
    with pytest.raises(DimensionMismatch):
        bias_summary(np.zeros((3, 2)), [0.0])
    with pytest.raises(DimensionMismatch):
        variance_summary(np.zeros((3, 2)), np.zeros((3, 1)), 1)


# ---------------------------------------------------------------- intervals and aggregation


def test_interval_and_coverage():
    lo, hi = confidence_interval(1.0, 0.5, 10, 0.05)
    q = stats.t.ppf(0.975, 10)
    assert (lo, hi) == pytest.approx((1 - q * 0.5, 1 + q * 0.5))
    assert covered(lo, hi, 1.0) and not covered(lo, hi, 3.0)
    with pytest.raises(DomainError):
        confidence_interval(1.0, 0.0, 10, 0.05)


def test_aggregate_nominal_coverage():
    rng = np.random.default_rng(0)
    iters, df, se = 4000, 30, 0.2
    est = 0.5 + se * rng.standard_t(df, size=(iters, 1))
    agg = aggregate(("x1",), est, np.full((iters, 1), se), [0.5], df, 0.05, n_per_study=10)
    # binomial sd of the coverage rate at 4000 draws is ~0.0034
    assert abs(agg.coverage[0] - 0.95) < 4 * np.sqrt(0.95 * 0.05 / iters)
    assert abs(agg.mean_bias[0]) < 4 * agg.mc_se[0]
    assert agg.ci_width[0] == pytest.approx(2 * stats.t.ppf(0.975, df) * se)
    assert agg.paper_var[0] == pytest.approx(10 * se**2)
    assert agg.iterations == iters and len(agg.power) == 1
    assert agg.power[0].se == pytest.approx(se)
    assert agg.mse[0] == pytest.approx(agg.emp_var[0] + agg.mean_bias[0] ** 2)
    assert agg.mean_abs_bias()[0] == pytest.approx(np.mean(np.abs(est - 0.5)))
