import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metareg.datagen import MetaDataset
from metareg.errors import CollinearDesign, DimensionMismatch, DomainError, GroupTooSmall
from metareg.estimators import (
    ALL_SPECS,
    VARIANCE_FLOOR,
    FitResult,
    SpecKind,
    build_design,
    estimate_variance_components,
    fit,
    fit_all,
    group_residual_variances,
    wls_fit,
)

from .conftest import make_dataset


def _random_panel(rng, n_studies, n, k, locations=None):
    """Balanced panel with study intercepts and k covariates."""
    L = locations or n_studies
    T = max(1, n_studies // L)
    study = np.repeat(np.arange(L * T), n)
    x = rng.normal(size=(study.size, k))
    b = rng.normal(size=k)
    alpha = rng.normal(scale=3.0, size=L * T)
    y = alpha[study] + x @ b + rng.normal(scale=rng.uniform(0.2, 2.0, size=L * T))[study] * rng.normal(size=study.size)
    return MetaDataset(y, x, study, study // T, study % T + 1)


# ---------------------------------------------------------------- specs and designs


def test_spec_taxonomy():
    assert len(ALL_SPECS) == 10
    assert SpecKind.FE_lt.grouping == "location_time"
    assert SpecKind.RE_l.grouping == "location" and SpecKind.RE_l.is_random
    assert SpecKind.ME_s.effect == "mixed"
    assert [s.value for s in ALL_SPECS if s.has_trend] == ["FE_sTrend", "FE_lTrend"]
    assert SpecKind.parse("fe_ltrend") is SpecKind.FE_lTrend
    with pytest.raises(ValueError):
        SpecKind.parse("FE_x")


@pytest.mark.parametrize(
    "spec,n_cols",
    [
        (SpecKind.FE_s, 1 + 1 + 24),
        (SpecKind.FE_lt, 1 + 1 + 4 + 4),
        (SpecKind.FE_l, 1 + 1 + 4),
        (SpecKind.FE_t, 1 + 1 + 4),
        (SpecKind.FE_lTrend, 1 + 1 + 1 + 4),
        (SpecKind.FE_sTrend, 1 + 1 + 1 + 23),
        (SpecKind.RE_s, 2),
    ],
)
def test_design_column_counts(small_dataset, spec, n_cols):
    X, groups, names = build_design(small_dataset, spec)
    assert X.shape == (small_dataset.n_obs, n_cols)
    assert len(names) == n_cols and names[:2] == ("const", "x1")
    assert groups.shape == (small_dataset.n_obs,)


def test_trend_column_values(small_dataset):
    X, _, names = build_design(small_dataset, SpecKind.FE_lTrend)
    t0 = X[:, names.index("trend")]
    assert set(np.round(t0, 12)) == {-1.0, -0.5, 0.0, 0.5, 1.0}
    np.testing.assert_allclose(t0, (2 * small_dataset.time - 6) / 4)


@pytest.mark.parametrize("spec", [s for s in ALL_SPECS if not s.is_random])
def test_designs_full_rank(small_dataset, spec):
    X, _, _ = build_design(small_dataset, spec)
    assert np.linalg.matrix_rank(X) == X.shape[1]


# ---------------------------------------------------------------- WLS core


@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(8, 60))
def test_unit_weight_wls_equals_ols(seed, p, n):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p))])
    y = rng.normal(size=n)
    res = wls_fit(X, y, np.ones(n))
    ols = np.linalg.lstsq(X, y, rcond=None)[0]
    np.testing.assert_allclose(res.coef, ols, atol=1e-10, rtol=0)
    np.testing.assert_allclose(res.se, np.sqrt(np.diag(np.linalg.inv(X.T @ X))), rtol=1e-8)
    assert res.df_resid == n - p - 1


@given(st.integers(0, 10_000), st.integers(8, 40))
def test_wls_matches_row_scaled_ols(seed, n):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = rng.normal(size=n)
    w = rng.uniform(0.1, 10.0, size=n)
    res = wls_fit(X, y, w)
    sw = np.sqrt(w)
    expected = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)[0]
    np.testing.assert_allclose(res.coef, expected, atol=1e-10)


def test_wls_hand_example():
    res = wls_fit([[1, 0], [1, 1], [1, 2]], [1.0, 2.0, 3.0], np.ones(3))
    np.testing.assert_allclose(res.coef, [1.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(res.resid, 0.0, atol=1e-12)


def test_wls_scaled_se_invariant_to_weight_level(rng):
    X = np.column_stack([np.ones(50), rng.normal(size=50)])
    y = X @ [0.3, 1.2] + rng.normal(size=50)
    w = rng.uniform(0.5, 2.0, size=50)
    a = wls_fit(X, y, w, scale=True)
    b = wls_fit(X, y, 37.0 * w, scale=True)
    np.testing.assert_allclose(a.se, b.se, rtol=1e-10)
    np.testing.assert_allclose(a.coef, b.coef, rtol=1e-12)


def test_wls_collinear_and_invalid():
    x = np.arange(10.0)
    with pytest.raises(CollinearDesign):
        wls_fit(np.column_stack([np.ones(10), x, 2 * x]), x, np.ones(10))
    with pytest.raises(CollinearDesign):
        wls_fit(np.column_stack([np.ones(10), np.zeros(10)]), x, np.ones(10))
    with pytest.raises(DomainError):
        wls_fit(np.ones((3, 1)), np.ones(3), [1.0, 0.0, 1.0])
    with pytest.raises(DimensionMismatch):
        wls_fit(np.ones((3, 1)), np.ones(4), np.ones(3))


# ---------------------------------------------------------------- first stage


def test_group_variances_homoskedastic():
    rng = np.random.default_rng(21)
    n = 10_000
    groups = np.repeat([0, 1], n)
    X = np.column_stack([np.ones(2 * n), rng.normal(size=2 * n)])
    y = X @ [1.0, 0.5] + rng.normal(size=2 * n)
    s2 = group_residual_variances(X, y, groups)
    # var of a sample variance ~ 2 sigma^4 / n; difference of two has twice that
    assert abs(s2[0] - s2[1]) < 4 * np.sqrt(4.0 / n)


def test_group_variance_floor():
    X = np.column_stack([np.ones(6), [0, 1, 2, 0, 1, 2.0]])
    y = np.array([1.0, 1.0, 1.0, 2.0, 2.5, 3.0])
    X = np.column_stack([X, np.repeat([0.0, 1.0], 3)])
    s2 = group_residual_variances(X, 1.0 + 0.5 * X[:, 1] + X[:, 2], np.repeat([0, 1], 3))
    np.testing.assert_array_equal(s2, VARIANCE_FLOOR)
    assert np.all(group_residual_variances(X, y, np.repeat([0, 1], 3)) > 0)


def test_group_variances_denominators_sum():
    # N - p total degrees of freedom: pooled SSR / (N - p) is the size-weighted mean of s2
    rng = np.random.default_rng(2)
    groups = np.repeat([0, 1, 2], [10, 20, 30])
    X = np.column_stack([np.ones(60), rng.normal(size=60)])
    y = rng.normal(size=60)
    s2 = group_residual_variances(X, y, groups)
    resid = y - X @ np.linalg.lstsq(X, y, rcond=None)[0]
    counts = np.array([10, 20, 30])
    assert np.sum(s2 * counts * (1 - 2 / 60)) == pytest.approx(resid @ resid, rel=1e-12)


def test_group_too_small():
    X = np.column_stack([np.ones(5), np.arange(5.0)])
    with pytest.raises(GroupTooSmall):
        group_residual_variances(X, np.arange(5.0), np.array([0, 0, 0, 0, 1]), min_rows=2)


def test_study_variances_near_true_value():
    d = make_dataset(case=1, n=150, seed=9)
    X, groups, _ = build_design(d, SpecKind.FE_s)
    s2 = group_residual_variances(X, d.y, groups)
    # sd of s2 ~ 0.75 sqrt(2/150) ~ 0.087, so 0.2 is a bit over 2 sd per study;
    # the pooled mean must be much tighter
    assert np.all(np.abs(s2 - 0.75) < 0.35)
    assert abs(s2.mean() - 0.75) < 4 * 0.75 * np.sqrt(2 / d.n_obs)


# ---------------------------------------------------------------- variance components


def _demeaned_panel(rng, G=6, n=30, shift=None):
    groups = np.repeat(np.arange(G), n)
    x = rng.normal(size=(G * n, 1))
    e = rng.normal(size=G * n)
    for g in range(G):
        m = groups == g
        x[m] -= x[m].mean()
        e[m] -= e[m].mean()
    y = 0.5 * x[:, 0] + e
    if shift is not None:
        y = y + shift[groups]
    return MetaDataset(y, x, groups, groups, np.ones(G * n, dtype=int))


def test_identical_group_means_give_zero_lambda(rng):
    vc = estimate_variance_components(_demeaned_panel(rng), "study")
    assert vc.sigma2_alpha == 0.0 and vc.lam == 0.0


def test_large_between_variance_gives_lambda_near_one(rng):
    vc = estimate_variance_components(_demeaned_panel(rng, shift=100.0 * np.arange(6)), "study")
    assert vc.lam > 0.95


def test_lambda_monotone_in_between_variance():
    lams = []
    for scale in (0.0, 0.1, 0.3, 1.0, 3.0, 10.0):
        vc = estimate_variance_components(_demeaned_panel(np.random.default_rng(1), shift=scale * np.arange(6.0)), "study")
        lams.append(vc.lam)
    assert lams[0] == 0.0
    assert all(b > a for a, b in zip(lams[1:], lams[2:]))


def test_between_variance_case2_location():
    d = make_dataset(case=2, n=150, seed=4)
    vc = estimate_variance_components(d, "location")
    target = np.var([-10, -5, 0, 5, 10])
    assert abs(vc.sigma2_alpha - target) < 0.2 * target
    assert vc.sigma2_eps == pytest.approx(0.75 + np.var(0.1 * np.arange(5)), abs=0.1)


def test_variance_components_need_two_groups():
    d = make_dataset(n=10)
    one = MetaDataset(d.y, d.x, np.zeros(d.n_obs, int), np.zeros(d.n_obs, int), d.time)
    with pytest.raises(GroupTooSmall):
        estimate_variance_components(one, "study")


def test_strict_lambda_is_clipped():
    vc = estimate_variance_components(make_dataset(case=2, n=50), "study", strict_paper=True)
    assert 0.0 <= vc.lam <= 1.0


# ---------------------------------------------------------------- fitting


def _noiseless(k=2, seed=0, additive=False):
    rng = np.random.default_rng(seed)
    study = np.repeat(np.arange(12), 8)
    loc, t = study // 4, study % 4
    x = rng.normal(size=(study.size, k))
    b = np.arange(1, k + 1) * 0.25
    if additive:
        alpha = rng.normal(scale=5, size=3)[loc] + rng.normal(scale=5, size=4)[t]
    else:
        alpha = rng.normal(scale=5, size=12)[study]
    return MetaDataset(alpha + x @ b, x, study, loc, t + 1), b


@pytest.mark.parametrize("spec", [SpecKind.FE_s, SpecKind.FE_sTrend, SpecKind.FE_lt])
def test_noiseless_recovers_slopes(spec):
    # location and time dummies only absorb additive intercepts
    data, b = _noiseless(additive=spec is SpecKind.FE_lt)
    res = fit(spec, data)
    np.testing.assert_allclose(res.slopes, b, atol=1e-8)
    assert np.all(res.slope_se > 0)


@given(st.integers(0, 10_000), st.integers(2, 6), st.integers(3, 20), st.integers(1, 3))
def test_dummy_fe_equals_within_transform(seed, n_studies, n, k):
    rng = np.random.default_rng(seed)
    if n < k + 2:
        n = k + 2
    data = _random_panel(rng, n_studies, n, k)
    res = fit(SpecKind.FE_s, data)
    # Oracle: group-demean y and X, then WLS with the same per-group weights.
    w = res.group_weights[data.study]
    yd, xd = data.y.copy(), data.x.copy()
    for g in range(n_studies):
        m = data.study == g
        yd[m] -= yd[m].mean()
        xd[m] -= xd[m].mean(axis=0)
    sw = np.sqrt(w)
    within = np.linalg.lstsq(xd * sw[:, None], yd * sw, rcond=None)[0]
    np.testing.assert_allclose(res.slopes, within, atol=1e-8)


def test_fit_result_invariants():
    d = make_dataset(case=7, n=30, k=3, seed=2)
    for spec in ALL_SPECS:
        res = fit(spec, d)
        assert isinstance(res, FitResult) and res.spec is spec
        assert res.slopes.shape == (3,) and np.all(res.slope_se > 0)
        assert res.df_resid > 0
        assert (res.trend is not None) == spec.has_trend
        if not spec.is_random:
            X, _, _ = build_design(d, spec)
            assert res.df_resid == d.n_obs - X.shape[1]


def test_permutation_invariance():
    d = make_dataset(case=2, n=15, k=3, seed=5)
    order = np.random.default_rng(0).permutation(d.n_obs)
    p = d.permuted(order)
    for spec in ALL_SPECS:
        a, b = fit(spec, d), fit(spec, p)
        np.testing.assert_allclose(a.slopes, b.slopes, atol=1e-10)
        np.testing.assert_allclose(a.slope_se, b.slope_se, atol=1e-10)
        if spec.has_trend:
            assert a.trend == pytest.approx(b.trend, abs=1e-10)


def test_mixed_equals_random():
    d = make_dataset(case=1, n=20, seed=3)
    for me, re in ((SpecKind.ME_s, SpecKind.RE_s), (SpecKind.ME_l, SpecKind.RE_l)):
        a, b = fit(me, d), fit(re, d)
        np.testing.assert_array_equal(a.coef, b.coef)
        np.testing.assert_array_equal(a.slope_se, b.slope_se)


def test_fit_all_matches_individual_fits():
    d = make_dataset(case=7, n=20, seed=6)
    together = fit_all(d)
    for spec in ALL_SPECS:
        alone = fit(spec, d)
        np.testing.assert_array_equal(together[spec].coef, alone.coef)
        np.testing.assert_array_equal(together[spec].slope_se, alone.slope_se)
        assert together[spec].spec is spec


def test_fit_all_returns_failures():
    d = make_dataset(n=20)
    dup = MetaDataset(d.y, np.column_stack([d.x, d.x]), d.study, d.location, d.time)
    out = fit_all(dup, [SpecKind.FE_s, SpecKind.FE_l])
    assert all(isinstance(v, CollinearDesign) for v in out.values())


def test_strict_paper_scalar_se():
    d = make_dataset(case=1, n=20, k=3)
    res = fit(SpecKind.RE_s, d, strict_paper=True)
    assert np.all(res.slope_se == res.slope_se[0])
    assert res.slope_se[0] == pytest.approx(np.sqrt(1 / np.sum(res.group_weights)))
    lt = fit(SpecKind.FE_lt, d, strict_paper=True)
    assert np.all(lt.slope_se == lt.slope_se[0])


def test_trend_estimates_on_noiseless_trend():
    # mu_Y = location base + 0.4 * (t - 1): FE_lTrend recovers slope 0.8 on t0 (T=5)
    rng = np.random.default_rng(0)
    L, T, n = 3, 5, 10
    study = np.repeat(np.arange(L * T), n)
    loc, t = study // T, study % T + 1
    x = rng.normal(size=(study.size, 1))
    y = np.array([-1.0, 0.0, 2.0])[loc] + 0.4 * (t - 1) + 0.5 * x[:, 0]
    d = MetaDataset(y, x, study, loc, t)
    res = fit(SpecKind.FE_lTrend, d)
    assert res.trend == pytest.approx(0.8, abs=1e-8)
