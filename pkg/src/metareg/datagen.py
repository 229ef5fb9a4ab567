"""Synthetic meta-regression data with location and time heterogeneity.

Every study ``(location l, period t)`` draws ``n`` subjects jointly from
``N((mu_Y(l, t), mu_X), Sigma)``. Location heterogeneity enters through a base
mean per location and time heterogeneity through a constant per-period
increment, so the slopes are shared while each study has its own intercept.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatch,
    DomainError,
    IndexOutOfRange,
    UnsupportedCovariateCount,
)
from .numerics import RngStream, cholesky, mvn_sample, solve_spd

SMALL_TIME_EFFECT = 0.1
LARGE_TIME_EFFECT = 0.5
DEFAULT_PERIODS = 5
DEFAULT_ITERATIONS = 1000
PAPER_ITERATIONS = 10_000
SAMPLE_SIZES = (50, 100, 150)
COVARIATE_COUNTS = (1, 3, 5)


def _symmetric(half, centre=True):
    vals = sorted({-v for v in half} | set(half) | ({0.0} if centre else set()))
    return tuple(float(v) for v in vals)


# Base outcome means per location, ascending; index = location id.
LOCATION_SETS = {
    (5, "small"): (-2.0, -1.0, 0.0, 1.0, 2.0),
    (5, "large"): (-10.0, -5.0, 0.0, 5.0, 10.0),
    (9, "small"): (-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0),
    (9, "large"): (-10.0, -7.5, -5.0, -2.5, 0.0, 2.5, 5.0, 7.5, 10.0),
    (15, "small"): _symmetric((0.15, 0.33, 0.66, 1.0, 1.33, 1.66, 2.0)),
    (15, "large"): _symmetric((1.0, 2.5, 4.0, 5.5, 7.0, 8.5, 10.0)),
}

_CASE_LOCATIONS = {1: 5, 2: 5, 3: 9, 4: 9, 5: 15, 6: 15}

_COVARIATE_MEANS = {
    1: (1.0,),
    3: (1.0, 0.5, 1.5),
    5: (1.0, 0.5, 1.5, 0.1, 1.1),
}

# Joint covariance in (Y, X1..Xk) order.
_COVARIANCES = {
    1: ((1.0, 0.5), (0.5, 1.0)),
    3: (
        (1.0, 0.5, 0.25, 0.2),
        (0.5, 1.0, 0.0, 0.1),
        (0.25, 0.0, 1.0, 0.1),
        (0.2, 0.1, 0.1, 1.0),
    ),
    5: (
        (1.0, 0.5, 0.25, 0.2, 0.25, 0.5),
        (0.5, 1.0, 0.0, 0.1, 0.2, 0.3),
        (0.25, 0.0, 1.0, 0.1, 0.0, 0.2),
        (0.2, 0.1, 0.1, 1.0, 0.0, 0.5),
        (0.25, 0.2, 0.0, 0.0, 1.0, 0.1),
        (0.5, 0.3, 0.2, 0.5, 0.1, 1.0),
    ),
}


@dataclass(frozen=True)
class JointDistribution:
    """Mean and covariance of ``(Y, X1..Xk)``; ``mean[0]`` is a placeholder
    for mu_Y, which is set per study."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if mean.ndim != 1 or mean.size < 2:
            raise DimensionMismatch("mean must hold Y and at least one covariate")
        if cov.shape != (mean.size, mean.size):
            raise DimensionMismatch(f"cov shape {cov.shape} does not match mean length {mean.size}")
        cholesky(cov)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def k(self) -> int:
        return self.mean.size - 1

    @property
    def covariate_means(self) -> np.ndarray:
        return self.mean[1:]


def build_joint_distribution(k: int, cov=None, covariate_means=None) -> JointDistribution:
    """Joint distribution for ``k`` covariates.

    Without overrides only k in {1, 3, 5} is available. Passing ``cov`` (and
    optionally ``covariate_means``) builds a custom, SPD-validated distribution.
    """
    if cov is None:
        if k not in _COVARIANCES:
            raise UnsupportedCovariateCount(f"k={k}; built-in designs exist for k in (1, 3, 5)")
        cov = _COVARIANCES[k]
        covariate_means = _COVARIATE_MEANS[k] if covariate_means is None else covariate_means
    cov = np.asarray(cov, dtype=float)
    if covariate_means is None:
        if k in _COVARIATE_MEANS and cov.shape == (k + 1, k + 1):
            covariate_means = _COVARIATE_MEANS[k]
        else:
            raise ConfigError("overrides.covariate_means", "required with a custom covariance")
    means = np.asarray(covariate_means, dtype=float)
    if means.size != k:
        raise DimensionMismatch(f"{means.size} covariate means for k={k}")
    return JointDistribution(np.concatenate(([0.0], means)), cov)


def derive_true_slopes(dist: JointDistribution) -> tuple[np.ndarray, float]:
    """Population regression of Y on X: slopes and conditional error variance."""
    s_xx = dist.cov[1:, 1:]
    s_xy = dist.cov[1:, 0]
    slopes = solve_spd(s_xx, s_xy)
    sigma2 = float(dist.cov[0, 0] - s_xy @ slopes)
    if sigma2 <= 0:
        raise DomainError("implied error variance is not positive")
    return slopes, sigma2


def derive_intercept(mu_y: float, slopes, covariate_means) -> float:
    slopes = np.atleast_1d(np.asarray(slopes, dtype=float))
    covariate_means = np.atleast_1d(np.asarray(covariate_means, dtype=float))
    if slopes.shape != covariate_means.shape:
        raise DimensionMismatch(f"{slopes.size} slopes vs {covariate_means.size} covariate means")
    return float(mu_y - slopes @ covariate_means)


def rescale_trend(t, n_periods: int):
    """Map period ``t`` in 1..n onto [-1, 1] via (2t - n - 1) / (n - 1)."""
    if n_periods < 2:
        raise DomainError("need at least two periods for a trend")
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > n_periods):
        raise DomainError(f"period outside 1..{n_periods}")
    out = (2.0 * t_arr - n_periods - 1.0) / (n_periods - 1.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CaseSpec:
    case_id: int
    location_means: tuple
    time_increment: float

    @property
    def n_locations(self) -> int:
        return len(self.location_means)

    @classmethod
    def from_id(cls, case_id: int) -> "CaseSpec":
        if not 1 <= case_id <= 12:
            raise ConfigError("case", f"case id {case_id} is not in 1..12")
        base = (case_id - 1) % 6 + 1
        size = "small" if base % 2 == 1 else "large"
        increment = SMALL_TIME_EFFECT if case_id <= 6 else LARGE_TIME_EFFECT
        return cls(case_id, LOCATION_SETS[(_CASE_LOCATIONS[base], size)], increment)

    @classmethod
    def custom(cls, location_means, time_increment: float) -> "CaseSpec":
        means = tuple(float(m) for m in location_means)
        if len(means) < 1:
            raise ConfigError("overrides.location_means", "need at least one location")
        return cls(0, means, float(time_increment))


@dataclass(frozen=True)
class SimulationConfig:
    case: CaseSpec
    n: int = 100
    k: int = 1
    periods: int = DEFAULT_PERIODS
    iterations: int = DEFAULT_ITERATIONS
    seed: int = 20240521
    alpha: float = 0.05
    allow_custom: bool = False
    distribution: JointDistribution | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.allow_custom:
            if self.case.case_id == 0:
                raise ConfigError("case", "custom cases require overrides.allow_custom")
            if self.n not in SAMPLE_SIZES:
                raise ConfigError("n", f"n={self.n} not in {SAMPLE_SIZES}")
            if self.k not in COVARIATE_COUNTS:
                raise ConfigError("k", f"k={self.k} not in {COVARIATE_COUNTS}")
        if self.n < 1:
            raise ConfigError("n", "must be positive")
        if self.k < 1:
            raise ConfigError("k", "must be positive")
        if self.periods < 1:
            raise ConfigError("periods", "must be positive")
        if self.iterations < 1:
            raise ConfigError("iterations", "must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha", f"{self.alpha} not in (0, 1)")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must be a 64-bit unsigned integer")
        if self.distribution is not None and self.distribution.k != self.k:
            raise ConfigError("overrides.covariance", f"covariance is for k={self.distribution.k}, config has k={self.k}")

    @property
    def n_locations(self) -> int:
        return self.case.n_locations

    @property
    def n_studies(self) -> int:
        return self.n_locations * self.periods

    @property
    def total_n(self) -> int:
        return self.n_studies * self.n

    def joint_distribution(self) -> JointDistribution:
        if self.distribution is not None:
            return self.distribution
        return build_joint_distribution(self.k)

    def with_updates(self, **changes) -> "SimulationConfig":
        return replace(self, **changes)

    def summary(self) -> dict:
        return {
            "case": self.case.case_id,
            "n": self.n,
            "k": self.k,
            "locations": self.n_locations,
            "periods": self.periods,
        }


def case_mu_y(case: CaseSpec, location: int, time: int, periods: int = DEFAULT_PERIODS) -> float:
    """Outcome mean of the study at ``location`` (0-based) and period ``time`` (1-based)."""
    if not 0 <= location < case.n_locations:
        raise IndexOutOfRange(f"location {location} outside 0..{case.n_locations - 1}")
    if not 1 <= time <= periods:
        raise IndexOutOfRange(f"time {time} outside 1..{periods}")
    return case.location_means[location] + case.time_increment * (time - 1)


@dataclass(frozen=True)
class TrueParameters:
    slopes: np.ndarray
    sigma2: float
    intercepts: np.ndarray  # (L, T)
    trend_slope: float


def true_parameters(config: SimulationConfig) -> TrueParameters:
    dist = config.joint_distribution()
    slopes, sigma2 = derive_true_slopes(dist)
    L, T = config.n_locations, config.periods
    intercepts = np.empty((L, T))
    for loc in range(L):
        for t in range(1, T + 1):
            mu = case_mu_y(config.case, loc, t, T)
            intercepts[loc, t - 1] = derive_intercept(mu, slopes, dist.covariate_means)
    # t0 advances 2/(T-1) per period, so increment-per-period becomes this slope.
    trend = config.case.time_increment * (T - 1) / 2.0 if T >= 2 else 0.0
    return TrueParameters(slopes, sigma2, intercepts, float(trend))


@dataclass(frozen=True, eq=False)
class MetaDataset:
    """Subject-level rows in column form.

    ``study`` is 0-based, ``location`` 0-based and ``time`` 1-based. Rows of
    the generator are ordered by study (location-major), ``n`` per study.
    """

    y: np.ndarray
    x: np.ndarray
    study: np.ndarray
    location: np.ndarray
    time: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        n = y.shape[0]
        arrays = {name: np.asarray(getattr(self, name), dtype=np.int64) for name in ("study", "location", "time")}
        if x.shape[0] != n or any(a.shape != (n,) for a in arrays.values()):
            raise DimensionMismatch("all columns must have the same number of rows")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return self.x.shape[1]

    @property
    def n_studies(self) -> int:
        return int(self.study.max()) + 1

    @property
    def n_locations(self) -> int:
        return int(self.location.max()) + 1

    @property
    def n_periods(self) -> int:
        return int(self.time.max())

    def is_balanced(self) -> bool:
        cells = self.location * self.n_periods + (self.time - 1)
        counts = np.bincount(cells, minlength=self.n_locations * self.n_periods)
        study_counts = np.bincount(self.study)
        return bool(np.all(counts == counts[0]) and counts[0] > 0 and np.all(study_counts == study_counts[0])
                    and study_counts.size == counts.size)

    def permuted(self, order) -> "MetaDataset":
        order = np.asarray(order)
        return MetaDataset(self.y[order], self.x[order], self.study[order], self.location[order],
                           self.time[order], dict(self.provenance))

    def columns(self) -> list[str]:
        return ["y"] + [f"x{j + 1}" for j in range(self.k)] + ["study", "location", "time"]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.columns())
            for i in range(self.n_obs):
                writer.writerow(
                    [repr(float(self.y[i]))]
                    + [repr(float(v)) for v in self.x[i]]
                    + [int(self.study[i]), int(self.location[i]), int(self.time[i])]
                )


def sample_dataset(config: SimulationConfig, rng) -> MetaDataset:
    """One balanced meta-regression: ``n`` joint draws for every (l, t) study."""
    dist = config.joint_distribution()
    L, T, n = config.n_locations, config.periods, config.n
    n_studies = L * T
    draws = mvn_sample(np.zeros(dist.mean.size), dist.cov, n_studies * n, rng)
    study = np.repeat(np.arange(n_studies), n)
    location = study // T
    time = study % T + 1
    mu_y = np.array([case_mu_y(config.case, l, t, T) for l in range(L) for t in range(1, T + 1)])
    y = draws[:, 0] + mu_y[study]
    x = draws[:, 1:] + dist.covariate_means
    return MetaDataset(y, x, study, location, time, provenance=config.summary())


def write_dataset(data: MetaDataset, path) -> Path:
    path = Path(path)
    data.to_csv(path)
    return path
