"""Ten meta-regression specifications fitted by feasible weighted least squares.

Fixed-effect specs put group dummies (first group dropped) in the design and
weight each row by the inverse residual variance of its group, estimated from
an unweighted first stage on the same design. Random- and mixed-effect specs
quasi-demean y and X by group and weight by ``1 / (sigma2_g + sigma2_alpha)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from .datagen import MetaDataset, rescale_trend
from .errors import CollinearDesign, DimensionMismatch, DomainError, GroupTooSmall, NotPositiveDefinite
from .numerics import cholesky, spd_rcond

VARIANCE_FLOOR = 1e-8
RCOND_FLOOR = 1e-10


class SpecKind(str, enum.Enum):
    RE_s = "RE_s"
    FE_s = "FE_s"
    ME_s = "ME_s"
    FE_lt = "FE_lt"
    FE_t = "FE_t"
    FE_l = "FE_l"
    RE_l = "RE_l"
    ME_l = "ME_l"
    FE_sTrend = "FE_sTrend"
    FE_lTrend = "FE_lTrend"

    @property
    def grouping(self) -> str:
        return _GROUPING[self]

    @property
    def effect(self) -> str:
        return _EFFECT[self]

    @property
    def has_trend(self) -> bool:
        return self in (SpecKind.FE_sTrend, SpecKind.FE_lTrend)

    @property
    def is_random(self) -> bool:
        return self.effect in ("random", "mixed")

    @classmethod
    def parse(cls, name: str) -> "SpecKind":
        key = name.strip().replace(",", "").replace("_{", "").replace("}", "")
        for spec in cls:
            if spec.value.lower() == key.lower() or spec.value.lower().replace("_", "") == key.lower().replace("_", ""):
                return spec
        raise ValueError(f"unknown spec {name!r}; expected one of {[s.value for s in cls]}")


ALL_SPECS = tuple(SpecKind)

_GROUPING = {
    SpecKind.RE_s: "study",
    SpecKind.FE_s: "study",
    SpecKind.ME_s: "study",
    SpecKind.FE_lt: "location_time",
    SpecKind.FE_t: "time",
    SpecKind.FE_l: "location",
    SpecKind.RE_l: "location",
    SpecKind.ME_l: "location",
    SpecKind.FE_sTrend: "study",
    SpecKind.FE_lTrend: "location",
}

_EFFECT = {
    SpecKind.RE_s: "random",
    SpecKind.FE_s: "fixed",
    SpecKind.ME_s: "mixed",
    SpecKind.FE_lt: "fixed",
    SpecKind.FE_t: "fixed",
    SpecKind.FE_l: "fixed",
    SpecKind.RE_l: "random",
    SpecKind.ME_l: "mixed",
    SpecKind.FE_sTrend: "fixed",
    SpecKind.FE_lTrend: "fixed",
}


@dataclass(frozen=True, eq=False)
class WLSResult:
    coef: np.ndarray
    se: np.ndarray
    cov: np.ndarray
    resid: np.ndarray
    df_resid: int


@dataclass(frozen=True, eq=False)
class VarianceComponents:
    sigma2_eps: float
    sigma2_alpha: float
    lam: float
    n_bar: float
    within_slopes: np.ndarray


@dataclass(frozen=True, eq=False)
class FitResult:
    spec: SpecKind
    names: tuple
    coef: np.ndarray
    slopes: np.ndarray
    slope_se: np.ndarray
    trend: float | None
    trend_se: float | None
    df_resid: int
    group_weights: np.ndarray
    variance_components: VarianceComponents | None = None


def _dense_codes(labels) -> tuple[np.ndarray, int]:
    labels = np.asarray(labels)
    if labels.dtype.kind in "iu" and labels.size and labels.min() >= 0:
        counts = np.bincount(labels)
        if np.all(counts > 0):
            return labels.astype(np.int64, copy=False), counts.size
    uniq, codes = np.unique(labels, return_inverse=True)
    return codes.astype(np.int64), uniq.size


def group_labels(data: MetaDataset, grouping: str) -> tuple[np.ndarray, int]:
    """Dense 0-based group code per row for a grouping name."""
    if grouping == "study":
        return _dense_codes(data.study)
    if grouping == "location":
        return _dense_codes(data.location)
    if grouping == "time":
        return _dense_codes(data.time)
    if grouping == "location_time":
        return _dense_codes(data.location * (data.n_periods + 1) + data.time)
    raise ValueError(f"unknown grouping {grouping!r}")


def _dummies(codes: np.ndarray, n_groups: int, prefix: str, drop=(0,)) -> tuple[np.ndarray, list[str]]:
    keep = [g for g in range(n_groups) if g not in set(drop)]
    col_of = np.full(n_groups, -1)
    col_of[keep] = np.arange(len(keep))
    cols = col_of[codes]
    rows = np.flatnonzero(cols >= 0)
    block = np.zeros((codes.size, len(keep)))
    block[rows, cols[rows]] = 1.0
    return block, [f"{prefix}[{g}]" for g in keep]


def build_design(data: MetaDataset, spec: SpecKind) -> tuple[np.ndarray, np.ndarray, tuple]:
    """Design matrix, weight-group code per row and column names for ``spec``.

    Columns are ``const, x1..xk``, then ``trend`` for trend specs, then the
    dummy block of the spec. Random/mixed specs carry no dummies; their group
    structure enters through quasi-demeaning in :func:`fit`.
    """
    spec = SpecKind(spec)
    n_obs, k = data.n_obs, data.k
    cols = [np.ones((n_obs, 1)), data.x]
    names = ["const"] + [f"x{j + 1}" for j in range(k)]
    if spec.has_trend:
        t0 = rescale_trend(data.time, data.n_periods)
        cols.append(np.asarray(t0, dtype=float)[:, None])
        names.append("trend")

    if spec is SpecKind.FE_s:
        codes, g = group_labels(data, "study")
        block, bn = _dummies(codes, g, "study")
        cols.append(block)
        names += bn
    elif spec is SpecKind.FE_sTrend:
        # The trend is constant within a study, hence in the span of the study
        # dummies; dropping the last study as well leaves it identified only
        # by the first-versus-last study contrast.
        codes, g = group_labels(data, "study")
        block, bn = _dummies(codes, g, "study", drop=(0, g - 1))
        cols.append(block)
        names += bn
    elif spec in (SpecKind.FE_l, SpecKind.FE_lTrend):
        codes, g = group_labels(data, "location")
        block, bn = _dummies(codes, g, "location")
        cols.append(block)
        names += bn
    elif spec is SpecKind.FE_t:
        codes, g = group_labels(data, "time")
        block, bn = _dummies(codes, g, "time")
        cols.append(block)
        names += bn
    elif spec is SpecKind.FE_lt:
        lc, lg = group_labels(data, "location")
        tc, tg = group_labels(data, "time")
        lb, ln = _dummies(lc, lg, "location")
        tb, tn = _dummies(tc, tg, "time")
        cols += [lb, tb]
        names += ln + tn

    X = np.hstack(cols)
    groups, _ = group_labels(data, spec.grouping)
    return X, groups, tuple(names)


def wls_fit(X, y, weights, scale: bool = False) -> WLSResult:
    """(X'WX)^-1 X'Wy with SEs from the diagonal of (X'WX)^-1.

    With ``scale=True`` the covariance is multiplied by the weighted residual
    variance ``sum(w e^2) / (N - p)`` (floored at 1e-8), which makes the SEs
    invariant to the overall level of estimated weights.

    The normal matrix is equilibrated to unit diagonal before the Cholesky
    factorization; a reciprocal condition number below 1e-10 is reported as
    CollinearDesign.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(weights, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or w.shape != y.shape:
        raise DimensionMismatch(f"X {X.shape}, y {y.shape}, weights {w.shape} do not conform")
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise DomainError("weights must be positive and finite")
    n_obs, p = X.shape
    if n_obs <= p:
        raise CollinearDesign(f"{n_obs} rows cannot identify {p} coefficients")

    sw = np.sqrt(w)
    Xw = X * sw[:, None]
    A = Xw.T @ Xw
    A = 0.5 * (A + A.T)
    b = Xw.T @ (y * sw)
    diag = np.diag(A)
    if np.any(diag <= 0):
        raise CollinearDesign("design has an all-zero column")
    d = 1.0 / np.sqrt(diag)
    As = A * d[:, None] * d[None, :]
    try:
        low = cholesky(As)
    except NotPositiveDefinite as exc:
        raise CollinearDesign(str(exc)) from exc
    rcond = spd_rcond(low, As)
    if rcond < RCOND_FLOOR:
        raise CollinearDesign(f"reciprocal condition number {rcond:.2e} below {RCOND_FLOOR}")
    coef = d * linalg.cho_solve((low, True), d * b)
    inv_s = linalg.cho_solve((low, True), np.eye(p))
    cov = inv_s * d[:, None] * d[None, :]
    resid = y - X @ coef
    if scale:
        cov = cov * max(float(np.sum(w * resid**2)) / (n_obs - p), VARIANCE_FLOOR)
    se = np.sqrt(np.diag(cov))
    return WLSResult(coef, se, cov, resid, n_obs - p)


def group_residual_variances(X, y, groups, n_groups: int | None = None, min_rows: int = 2) -> np.ndarray:
    """Per-group residual variance from an unweighted first-stage fit.

    The fit's ``p`` degrees of freedom are shared across groups in proportion
    to group size, so the denominators add up to ``N - p``. Variances are
    floored at 1e-8.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    groups = np.asarray(groups)
    if n_groups is None:
        n_groups = int(groups.max()) + 1
    counts = np.bincount(groups, minlength=n_groups)
    if np.any(counts < min_rows):
        g = int(np.argmin(counts))
        raise GroupTooSmall(f"group {g} has {counts[g]} rows; need at least {min_rows}")
    first = wls_fit(X, y, np.ones_like(y))
    n_obs, p = X.shape
    ssr = np.bincount(groups, weights=first.resid**2, minlength=n_groups)
    dof = counts - p * counts / n_obs
    return np.maximum(ssr / dof, VARIANCE_FLOOR)


def _group_means(values: np.ndarray, groups: np.ndarray, counts: np.ndarray) -> np.ndarray:
    if values.ndim == 1:
        return np.bincount(groups, weights=values, minlength=counts.size) / counts
    return np.column_stack([np.bincount(groups, weights=values[:, j], minlength=counts.size) / counts
                            for j in range(values.shape[1])])


def estimate_variance_components(data: MetaDataset, grouping: str | np.ndarray, strict_paper: bool = False) -> VarianceComponents:
    """Moment estimates of within and between-group variance and the
    quasi-demeaning factor ``lambda = 1 - sqrt(s2_eps / (n_bar s2_alpha + s2_eps))``.

    ``sigma2_alpha`` is the variance (over groups, divisor G) of group-mean
    residuals after removing the within slope, minus ``sigma2_eps / n_bar``,
    floored at zero. ``strict_paper`` swaps in the uncorrected formula
    ``(1 - sigma_eps) / sqrt(G sigma2_alpha + sigma2_eps)``, clipped to [0, 1].
    """
    if isinstance(grouping, str):
        groups, G = group_labels(data, grouping)
    else:
        groups, G = _dense_codes(grouping)
    if G < 2:
        raise GroupTooSmall("variance components need at least two groups")
    counts = np.bincount(groups, minlength=G).astype(float)
    if np.any(counts < 2):
        raise GroupTooSmall("every group needs at least two rows")
    y, x = data.y, data.x
    n_obs, k = x.shape
    y_bar = _group_means(y, groups, counts)
    x_bar = _group_means(x, groups, counts)
    y_w = y - y_bar[groups]
    x_w = x - x_bar[groups]
    xtx = x_w.T @ x_w
    try:
        slopes = linalg.cho_solve((cholesky(xtx), True), x_w.T @ y_w)
    except NotPositiveDefinite as exc:
        raise CollinearDesign("covariates have no within-group variation") from exc
    resid = y_w - x_w @ slopes
    dof = n_obs - G - k
    if dof <= 0:
        raise GroupTooSmall("not enough rows for the within regression")
    sigma2_eps = max(float(resid @ resid) / dof, VARIANCE_FLOOR)
    u_bar = y_bar - x_bar @ slopes
    n_bar = n_obs / G
    sigma2_alpha = max(float(np.mean((u_bar - u_bar.mean()) ** 2)) - sigma2_eps / n_bar, 0.0)
    if strict_paper:
        lam = (1.0 - np.sqrt(sigma2_eps)) / np.sqrt(G * sigma2_alpha + sigma2_eps)
        lam = float(min(max(lam, 0.0), 1.0))
    else:
        lam = 1.0 - np.sqrt(sigma2_eps / (n_bar * sigma2_alpha + sigma2_eps))
    return VarianceComponents(sigma2_eps, sigma2_alpha, float(lam), n_bar, slopes)


def _unpack(spec, names, core, k, weights_by_group, vc=None, slope_se=None, trend_se=None):
    coef = core.coef
    slopes = coef[1:1 + k].copy()
    se = core.se[1:1 + k].copy() if slope_se is None else slope_se
    trend = tse = None
    if spec.has_trend:
        j = names.index("trend")
        trend = float(coef[j])
        tse = float(core.se[j]) if trend_se is None else trend_se
    return FitResult(spec, names, coef, slopes, se, trend, tse, core.df_resid, weights_by_group, vc)


def _cached(cache, key, make):
    if cache is None:
        return make()
    if key not in cache:
        cache[key] = make()
    return cache[key]


def _first_stage(data, design_spec, groups, n_groups, cache):
    X, _, _ = _cached(cache, ("design", design_spec), lambda: build_design(data, design_spec))
    return _cached(
        cache,
        ("s2", design_spec, n_groups, groups.tobytes() if cache is not None else None),
        lambda: group_residual_variances(X, data.y, groups, n_groups, min_rows=data.k + 2),
    )


def _fit_fixed(spec, data, strict_paper, cache=None):
    X, groups, names = _cached(cache, ("design", spec), lambda: build_design(data, spec))
    n_groups = int(groups.max()) + 1
    s2 = _first_stage(data, spec, groups, n_groups, cache)
    w_group = 1.0 / s2
    core = wls_fit(X, data.y, w_group[groups], scale=True)
    slope_se = trend_se = None
    if strict_paper and spec is SpecKind.FE_lt:
        loc, nl = group_labels(data, "location")
        tim, nt = group_labels(data, "time")
        s2_l = group_residual_variances(X, data.y, loc, nl, min_rows=data.k + 2)
        s2_t = group_residual_variances(X, data.y, tim, nt, min_rows=data.k + 2)
        present = np.unique(loc * nt + tim)
        scalar = np.sqrt(1.0 / np.sum(1.0 / (s2_l[present // nt] + s2_t[present % nt])))
        slope_se = np.full(data.k, scalar)
    return _unpack(spec, names, core, data.k, w_group, slope_se=slope_se, trend_se=trend_se)


def _fit_random(spec, data, strict_paper, cache=None):
    groups, n_groups = group_labels(data, spec.grouping)
    vc = estimate_variance_components(data, spec.grouping, strict_paper=strict_paper)
    # Within-group error variances come from the dummy design at this grouping.
    fe_spec = SpecKind.FE_s if spec.grouping == "study" else SpecKind.FE_l
    s2 = _first_stage(data, fe_spec, groups, n_groups, cache)
    counts = np.bincount(groups, minlength=n_groups).astype(float)
    lam = vc.lam
    y_star = data.y - lam * _group_means(data.y, groups, counts)[groups]
    x_star = data.x - lam * _group_means(data.x, groups, counts)[groups]
    X = np.column_stack([np.full(data.n_obs, 1.0 - lam), x_star])
    names = ("const",) + tuple(f"x{j + 1}" for j in range(data.k))
    w_group = 1.0 / (s2 + vc.sigma2_alpha)
    if lam >= 1.0:
        # Full demeaning removes the intercept column entirely.
        core = wls_fit(X[:, 1:], y_star, w_group[groups], scale=True)
        core = WLSResult(np.concatenate(([0.0], core.coef)), np.concatenate(([np.inf], core.se)),
                         core.cov, core.resid, core.df_resid)
    else:
        core = wls_fit(X, y_star, w_group[groups], scale=True)
    slope_se = None
    if strict_paper:
        slope_se = np.full(data.k, np.sqrt(1.0 / np.sum(w_group)))
    return _unpack(spec, names, core, data.k, w_group, vc=vc, slope_se=slope_se)


def fit(spec, data: MetaDataset, strict_paper: bool = False, cache: dict | None = None) -> FitResult:
    """Fit one specification. Mixed-effect specs share the random-effect path.

    ``cache`` may be a dict reused across calls on the same dataset so that
    designs and first-stage variances are built once.
    """
    spec = SpecKind(spec)
    if spec.is_random:
        return _fit_random(spec, data, strict_paper, cache)
    return _fit_fixed(spec, data, strict_paper, cache)


_RANDOM_TWIN = {SpecKind.ME_s: SpecKind.RE_s, SpecKind.ME_l: SpecKind.RE_l}


def fit_all(data: MetaDataset, specs=ALL_SPECS, strict_paper: bool = False) -> dict:
    """Fit several specs on one dataset; failures come back as exception instances."""
    cache: dict = {}
    out = {}
    for spec in map(SpecKind, specs):
        twin = _RANDOM_TWIN.get(spec)
        if twin in out and isinstance(out[twin], FitResult):
            out[spec] = replace(out[twin], spec=spec)
            continue
        try:
            out[spec] = fit(spec, data, strict_paper, cache)
        except (CollinearDesign, GroupTooSmall) as exc:
            out[spec] = exc
    return out
