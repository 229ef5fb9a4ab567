"""Monte Carlo performance criteria: power, bias, variance, interval precision,
plus the MSE/MAE/MPE/MAPE family."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, DomainError, UnsupportedNcp
from .numerics import MAX_NCP, noncentral_t_cdf, noncentral_t_sf, t_quantile

GRID_STEP = 0.1
GRID_POINTS = 100
POWER_CEILING = 1.0 - 1e-12
ALPHA_FLOOR = 1e-6
# Total N of case 1 at n = 50 (5 locations x 5 periods x 50 subjects).
REFERENCE_N = 1250


def discrepancy_grid() -> np.ndarray:
    return np.arange(1, GRID_POINTS + 1) / 10.0


@dataclass(frozen=True, eq=False)
class PowerCurve:
    """Power against the alternatives ``beta + 0.1 i`` for i = 1..100.

    ``miss`` holds the type II error ``P(t < c)`` computed directly rather than
    as ``1 - power``, so it stays informative where power rounds to one; it is
    zero where the noncentrality exceeds the supported range.
    """

    discrepancy: np.ndarray
    power: np.ndarray
    miss: np.ndarray
    alpha: float
    df: int
    se: float
    critical: float

    def index(self, discrepancy: float) -> int:
        i = int(round(discrepancy / GRID_STEP)) - 1
        if not 0 <= i < self.discrepancy.size or abs(self.discrepancy[i] - discrepancy) > 1e-9:
            raise DomainError(f"discrepancy {discrepancy} is not on the grid")
        return i

    def at(self, discrepancy: float) -> float:
        return float(self.power[self.index(discrepancy)])

    def miss_at(self, discrepancy: float) -> float:
        return float(self.miss[self.index(discrepancy)])


def power_at_discrepancy(discrepancy: float, se: float, df: float, alpha: float) -> tuple[float, float]:
    """(power, type II error) of the one-sided t test at ``|discrepancy| / se``."""
    if se <= 0:
        raise DomainError("standard error must be positive")
    c = t_quantile(1.0 - alpha, df)
    ncp = abs(discrepancy) / se
    if ncp > MAX_NCP:
        raise UnsupportedNcp(f"noncentrality {ncp:.3g} beyond {MAX_NCP}")
    miss = noncentral_t_cdf(c, df, ncp)
    # Take the smaller tail from its own integral; the larger is its complement.
    power = 1.0 - miss if miss < 0.5 else noncentral_t_sf(c, df, ncp)
    return min(power, POWER_CEILING), miss


def power_curve(se: float, df: float, alpha: float) -> PowerCurve:
    if se <= 0:
        raise DomainError("standard error must be positive")
    if df < 1:
        raise DomainError("df must be at least 1")
    grid = discrepancy_grid()
    power = np.empty(grid.size)
    miss = np.empty(grid.size)
    for i, d in enumerate(grid):
        try:
            power[i], miss[i] = power_at_discrepancy(d, se, df, alpha)
        except UnsupportedNcp:
            power[i:], miss[i:] = POWER_CEILING, 0.0
            break
    # Quadrature noise must not break monotonicity along the grid.
    power = np.maximum.accumulate(power)
    miss = np.minimum.accumulate(miss)
    return PowerCurve(grid, power, miss, float(alpha), int(df), float(se), t_quantile(1.0 - alpha, df))


def adjust_alpha(total_n: int, base_alpha: float, reference_n: int = REFERENCE_N) -> float:
    """Shrink the type I error as sqrt(reference_n / total_n) once total_n
    exceeds the reference, never below 1e-6."""
    if total_n < 1 or reference_n < 1:
        raise DomainError("sample sizes must be positive")
    if total_n <= reference_n:
        return float(base_alpha)
    return float(max(base_alpha * np.sqrt(reference_n / total_n), ALPHA_FLOOR))


def _as_estimates(estimates, truth):
    est = np.asarray(estimates, dtype=float)
    if est.ndim == 1:
        est = est[:, None]
    truth = np.atleast_1d(np.asarray(truth, dtype=float))
    if est.ndim != 2 or est.shape[1] != truth.size:
        raise DimensionMismatch(f"estimates {est.shape} vs truth of length {truth.size}")
    if est.shape[0] < 1:
        raise DimensionMismatch("need at least one iteration")
    return est, truth


def bias_summary(estimates, truth) -> tuple[np.ndarray, np.ndarray]:
    """Mean bias per parameter and the per-iteration bias matrix."""
    est, truth = _as_estimates(estimates, truth)
    per_iteration = est - truth
    return est.mean(axis=0) - truth, per_iteration


def variance_summary(estimates, ses, n_per_study: int) -> tuple[np.ndarray, np.ndarray]:
    """Empirical variance across iterations (divisor N) and the mean of n * se^2."""
    est = np.asarray(estimates, dtype=float)
    ses = np.asarray(ses, dtype=float)
    if est.ndim == 1:
        est, ses = est[:, None], ses.reshape(-1, 1)
    if est.shape != ses.shape:
        raise DimensionMismatch(f"estimates {est.shape} vs ses {ses.shape}")
    centred = est - est.mean(axis=0)
    emp = np.mean(centred**2, axis=0)
    scaled = np.mean(n_per_study * ses**2, axis=0)
    return emp, scaled


@dataclass(frozen=True, eq=False)
class ErrorMetrics:
    mse: np.ndarray
    mae: np.ndarray
    mpe: np.ndarray
    mape: np.ndarray
    undefined_percent: np.ndarray  # True where truth == 0


def error_metric_family(estimates, truth) -> ErrorMetrics:
    est, truth = _as_estimates(estimates, truth)
    err = est - truth
    undefined = truth == 0
    safe = np.where(undefined, 1.0, truth)
    # A near-zero truth gives an infinite relative error, which is the honest answer.
    with np.errstate(over="ignore", invalid="ignore"):
        rel = err / safe
        mpe = np.where(undefined, np.nan, np.mean(rel, axis=0))
        mape = np.where(undefined, np.nan, np.mean(np.abs(rel), axis=0))
    return ErrorMetrics(np.mean(err**2, axis=0), np.mean(np.abs(err), axis=0), mpe, mape, undefined)


def confidence_interval(beta_hat, se, df, alpha):
    """Two-sided Wald interval ``beta_hat +/- t_{1 - alpha/2, df} se``."""
    se = np.asarray(se, dtype=float)
    if np.any(se <= 0):
        raise DomainError("standard error must be positive")
    q = t_quantile(1.0 - alpha / 2.0, df)
    beta_hat = np.asarray(beta_hat, dtype=float)
    return beta_hat - q * se, beta_hat + q * se


def covered(lower, upper, truth):
    return (np.asarray(lower) <= truth) & (truth <= np.asarray(upper))


@dataclass(frozen=True, eq=False)
class AggregateMetrics:
    """Per-parameter Monte Carlo summaries over successful iterations."""

    names: tuple
    truth: np.ndarray
    mean_bias: np.ndarray
    biases: np.ndarray
    emp_var: np.ndarray
    paper_var: np.ndarray
    mse: np.ndarray
    mae: np.ndarray
    mpe: np.ndarray
    mape: np.ndarray
    coverage: np.ndarray
    ci_width: np.ndarray
    mean_se: np.ndarray
    power: list = field(default_factory=list)
    iterations: int = 0

    @property
    def mc_se(self) -> np.ndarray:
        """Monte Carlo standard error of the mean estimate."""
        return np.sqrt(self.emp_var / max(self.iterations - 1, 1))

    def mean_abs_bias(self) -> np.ndarray:
        return np.mean(np.abs(self.biases), axis=0)


def aggregate(names, estimates, ses, truth, df: int, alpha: float, n_per_study: int) -> AggregateMetrics:
    """Reduce per-iteration estimates and SEs (iterations x params) to metrics.

    Power curves use the mean SE across iterations.
    """
    est, truth = _as_estimates(estimates, truth)
    ses = np.asarray(ses, dtype=float).reshape(est.shape)
    mean_bias, per_it = bias_summary(est, truth)
    emp, scaled = variance_summary(est, ses, n_per_study)
    errs = error_metric_family(est, truth)
    lo, hi = confidence_interval(est, ses, df, alpha)
    cover = covered(lo, hi, truth).mean(axis=0)
    width = (hi - lo).mean(axis=0)
    mean_se = ses.mean(axis=0)
    curves = [power_curve(s, df, alpha) for s in mean_se]
    return AggregateMetrics(
        tuple(names), truth, mean_bias, per_it, emp, scaled, errs.mse, errs.mae, errs.mpe, errs.mape,
        cover, width, mean_se, curves, est.shape[0],
    )
