"""Monte Carlo driver: sample, fit every requested spec, reduce, write results.

Every iteration draws from its own PCG64 stream derived from
``(master seed, cell key, iteration)``, so results do not depend on how
iterations are scheduled across worker processes.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import SimulationConfig, TrueParameters, sample_dataset, true_parameters
from .errors import ConfigError, ExcessiveFailures
from .estimators import ALL_SPECS, FitResult, SpecKind, fit_all
from .metrics import AggregateMetrics, adjust_alpha, aggregate
from .numerics import GENERATOR_NAME, RngStream

FAILURE_THRESHOLD = 0.10
RNG_POLICIES = ("common", "independent")
THREADS_ENV = "METAREG_THREADS"

RESULT_COLUMNS = (
    "case", "n", "k", "spec", "param", "mean_bias", "emp_var", "paper_var", "mse", "mae",
    "mpe", "mape", "ci_coverage", "ci_width", "power_at_0p5", "failures",
)
FIT_SUMMARY_COLUMNS = ("case", "n", "k", "spec", "param", "mean_se", "df", "alpha")
RAW_COLUMNS = ("iteration", "spec", "param", "estimate", "se")


def cell_key(config: SimulationConfig, policy: str = "common", cell_index: int = 0) -> tuple:
    """Spawn key for a cell's streams.

    Under ``"common"`` the key depends only on the design shape, so cells that
    differ in outcome means alone reuse the same covariate and error draws
    (common random numbers). ``"independent"`` also keys on case and position.
    """
    shape = (config.n_locations, config.periods, config.n, config.k)
    if policy == "common":
        return (0,) + shape
    if policy == "independent":
        return (1, config.case.case_id, cell_index) + shape
    raise ConfigError("experiment.rng_policy", f"unknown policy {policy!r}; use one of {RNG_POLICIES}")


def child_stream(seed: int, key: tuple, iteration: int) -> RngStream:
    return RngStream(int(seed), tuple(key)).child(iteration)


def resolve_workers(requested: int) -> int:
    workers = max(1, int(requested))
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            workers = min(workers, max(1, int(cap)))
        except ValueError:
            raise ConfigError(THREADS_ENV, f"not an integer: {cap!r}") from None
    return workers


@dataclass(frozen=True, eq=False)
class _ChunkResult:
    start: int
    slopes: dict
    slope_se: dict
    trend: dict
    trend_se: dict
    df: dict
    failures: dict  # spec -> list of (iteration, error kind)


def _run_chunk(config: SimulationConfig, specs: tuple, strict_paper: bool, key: tuple, start: int, stop: int):
    m, k = stop - start, config.k
    slopes = {s: np.full((m, k), np.nan) for s in specs}
    slope_se = {s: np.full((m, k), np.nan) for s in specs}
    trend = {s: np.full(m, np.nan) for s in specs}
    trend_se = {s: np.full(m, np.nan) for s in specs}
    df = {s: None for s in specs}
    failures = {s: [] for s in specs}
    for row, j in enumerate(range(start, stop)):
        data = sample_dataset(config, child_stream(config.seed, key, j))
        fits = fit_all(data, specs, strict_paper)
        for s in specs:
            res = fits[s]
            if not isinstance(res, FitResult):
                failures[s].append((j, type(res).__name__))
                continue
            slopes[s][row] = res.slopes
            slope_se[s][row] = res.slope_se
            if res.trend is not None:
                trend[s][row] = res.trend
                trend_se[s][row] = res.trend_se
            df[s] = res.df_resid
    return _ChunkResult(start, slopes, slope_se, trend, trend_se, df, failures)


@dataclass(frozen=True, eq=False)
class SpecOutcome:
    """Per-spec reduction of one cell; metrics cover successful iterations only."""

    spec: SpecKind
    slopes: AggregateMetrics | None
    trend: AggregateMetrics | None
    df: int | None
    failures: dict
    raw_slopes: np.ndarray
    raw_slope_se: np.ndarray
    raw_trend: np.ndarray
    raw_trend_se: np.ndarray

    @property
    def n_failures(self) -> int:
        return int(sum(self.failures.values()))

    @property
    def successes(self) -> np.ndarray:
        return ~np.isnan(self.raw_slopes[:, 0])


@dataclass(frozen=True, eq=False)
class CellResult:
    config: SimulationConfig
    truth: TrueParameters
    alpha: float
    key: tuple
    outcomes: dict
    wall_time: float = field(default=0.0, compare=False)

    def __getitem__(self, spec) -> SpecOutcome:
        return self.outcomes[SpecKind(spec)]

    @property
    def label(self) -> str:
        c = self.config
        return f"case{c.case.case_id:02d}_n{c.n:03d}_k{c.k}"

    def summary_line(self) -> str:
        parts = []
        for spec, out in self.outcomes.items():
            if out.slopes is None:
                parts.append(f"{spec.value} failed")
                continue
            a = out.slopes
            parts.append(
                f"{spec.value} bias={a.mean_bias[0]:+.4f} var={a.emp_var[0]:.3e} "
                f"pow0.5={a.power[0].at(0.5):.4f} cov={a.coverage[0]:.3f}"
            )
        c = self.config
        return f"case {c.case.case_id} n={c.n} k={c.k}: " + "; ".join(parts)


def _merge(chunks, specs, iterations, k):
    chunks = sorted(chunks, key=lambda c: c.start)
    merged = {}
    for s in specs:
        df = next((c.df[s] for c in chunks if c.df[s] is not None), None)
        fails = [f for c in chunks for f in c.failures[s]]
        merged[s] = (
            np.concatenate([c.slopes[s] for c in chunks]).reshape(iterations, k),
            np.concatenate([c.slope_se[s] for c in chunks]).reshape(iterations, k),
            np.concatenate([c.trend[s] for c in chunks]),
            np.concatenate([c.trend_se[s] for c in chunks]),
            df,
            fails,
        )
    return merged


def _chunks(iterations: int, workers: int):
    if workers <= 1:
        return [(0, iterations)]
    size = max(1, math.ceil(iterations / (4 * workers)))
    return [(a, min(a + size, iterations)) for a in range(0, iterations, size)]


def run_cell(
    config: SimulationConfig,
    specs=ALL_SPECS,
    rng_policy: str = "common",
    workers: int = 1,
    cell_index: int = 0,
    strict_paper: bool = False,
) -> CellResult:
    """Run ``config.iterations`` Monte Carlo iterations of one design cell.

    Raises ExcessiveFailures (carrying the partial result) when more than 10%
    of iterations fail for any spec.
    """
    specs = tuple(SpecKind(s) for s in specs)
    if not specs:
        raise ConfigError("experiment.specs", "no specs requested")
    key = cell_key(config, rng_policy, cell_index)
    workers = resolve_workers(workers)
    t0 = time.perf_counter()
    bounds = _chunks(config.iterations, workers)
    if len(bounds) == 1:
        chunks = [_run_chunk(config, specs, strict_paper, key, 0, config.iterations)]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(bounds))) as pool:
            futures = [pool.submit(_run_chunk, config, specs, strict_paper, key, a, b) for a, b in bounds]
            chunks = [f.result() for f in futures]
    merged = _merge(chunks, specs, config.iterations, config.k)

    truth = true_parameters(config)
    alpha = adjust_alpha(config.total_n, config.alpha)
    names = tuple(f"x{i + 1}" for i in range(config.k))
    outcomes = {}
    for s in specs:
        est, se, tr, tr_se, df, fails = merged[s]
        ok = ~np.isnan(est[:, 0])
        counts: dict = {}
        for _, kind in fails:
            counts[kind] = counts.get(kind, 0) + 1
        slope_metrics = trend_metrics = None
        if ok.any():
            slope_metrics = aggregate(names, est[ok], se[ok], truth.slopes, df, alpha, config.n)
            if s.has_trend:
                trend_metrics = aggregate(("trend",), tr[ok], tr_se[ok], [truth.trend_slope], df, alpha, config.n)
        outcomes[s] = SpecOutcome(s, slope_metrics, trend_metrics, df, counts, est, se, tr, tr_se)

    result = CellResult(config, truth, alpha, key, outcomes, time.perf_counter() - t0)
    worst = max(outcomes.values(), key=lambda o: o.n_failures)
    if worst.n_failures > FAILURE_THRESHOLD * config.iterations:
        raise ExcessiveFailures(
            f"{result.label}: {worst.spec.value} failed in {worst.n_failures} of "
            f"{config.iterations} iterations ({worst.failures})",
            result=result,
        )
    return result


@dataclass(frozen=True)
class ExperimentPlan:
    cells: tuple
    specs: tuple = ALL_SPECS
    output_dir: Path | None = None
    workers: int = 1
    rng_policy: str = "common"
    strict_paper: bool = False

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        try:
            object.__setattr__(self, "specs", tuple(SpecKind(s) for s in self.specs))
        except ValueError as exc:
            raise ConfigError("experiment.specs", str(exc)) from None
        if not self.cells:
            raise ConfigError("experiment.cases", "plan has no cells")
        if not self.specs:
            raise ConfigError("experiment.specs", "plan has no specs")
        if len(set(self.specs)) != len(self.specs):
            raise ConfigError("experiment.specs", "duplicate specs")
        seen = set()
        for c in self.cells:
            ident = (c.case, c.n, c.k, c.periods)
            if ident in seen:
                raise ConfigError("experiment.cases", f"duplicate cell {c.summary()}")
            seen.add(ident)
        if self.rng_policy not in RNG_POLICIES:
            raise ConfigError("experiment.rng_policy", f"unknown policy {self.rng_policy!r}")
        if self.workers < 1:
            raise ConfigError("experiment.workers", "must be at least 1")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def result_rows(cell: CellResult) -> list[tuple]:
    c = cell.config
    rows = []
    for spec, out in cell.outcomes.items():
        for agg in (out.slopes, out.trend):
            if agg is None:
                continue
            for i, name in enumerate(agg.names):
                rows.append((
                    c.case.case_id, c.n, c.k, spec.value, name, agg.mean_bias[i], agg.emp_var[i],
                    agg.paper_var[i], agg.mse[i], agg.mae[i], agg.mpe[i], agg.mape[i],
                    agg.coverage[i], agg.ci_width[i], agg.power[i].at(0.5), out.n_failures,
                ))
    return rows


def fit_summary_rows(cell: CellResult) -> list[tuple]:
    c = cell.config
    rows = []
    for spec, out in cell.outcomes.items():
        for agg in (out.slopes, out.trend):
            if agg is None:
                continue
            for i, name in enumerate(agg.names):
                rows.append((c.case.case_id, c.n, c.k, spec.value, name, agg.mean_se[i], out.df, cell.alpha))
    return rows


def raw_rows(cell: CellResult) -> list[tuple]:
    rows = []
    for j in range(cell.config.iterations):
        for spec, out in cell.outcomes.items():
            for i in range(cell.config.k):
                rows.append((j, spec.value, f"x{i + 1}", out.raw_slopes[j, i], out.raw_slope_se[j, i]))
            if spec.has_trend:
                rows.append((j, spec.value, "trend", out.raw_trend[j], out.raw_trend_se[j]))
    return rows


def write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _check_writable(directory: Path) -> None:
    try:
        directory.mkdir(parents=True, exist_ok=True)
        probe = directory / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError("output.directory", f"{directory} is not writable ({exc.strerror})") from None


def manifest(plan: ExperimentPlan, cells) -> dict:
    seed_set = sorted({c.config.seed for c in cells})
    return {
        "software": "metareg",
        "version": __version__,
        "generator": GENERATOR_NAME,
        "master_seed": seed_set[0] if len(seed_set) == 1 else seed_set,
        "rng_policy": plan.rng_policy,
        "seed_derivation": "numpy SeedSequence(entropy=seed, spawn_key=cell_key + (iteration,)) -> PCG64",
        "strict_paper": plan.strict_paper,
        "specs": [s.value for s in plan.specs],
        "cells": [
            {
                "label": c.label,
                **c.config.summary(),
                "iterations": c.config.iterations,
                "seed": c.config.seed,
                "alpha": c.config.alpha,
                "adjusted_alpha": c.alpha,
                "time_increment": c.config.case.time_increment,
                "location_means": list(c.config.case.location_means),
                "cell_key": list(c.key),
                "failures": {s.value: o.failures for s, o in c.outcomes.items()},
            }
            for c in cells
        ],
    }


def write_outputs(plan: ExperimentPlan, cells, directory: Path) -> None:
    directory = Path(directory)
    all_results, all_fits = [], []
    for cell in cells:
        sub = directory / "cells" / cell.label
        sub.mkdir(parents=True, exist_ok=True)
        res, fits = result_rows(cell), fit_summary_rows(cell)
        write_csv(sub / "cell_results.csv", RESULT_COLUMNS, res)
        write_csv(sub / "fit_summary.csv", FIT_SUMMARY_COLUMNS, fits)
        write_csv(sub / "raw_estimates.csv", RAW_COLUMNS, raw_rows(cell))
        all_results += res
        all_fits += fits
    write_csv(directory / "cell_results.csv", RESULT_COLUMNS, all_results)
    write_csv(directory / "fit_summary.csv", FIT_SUMMARY_COLUMNS, all_fits)
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest(plan, cells), fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_experiment(plan: ExperimentPlan, on_cell=None) -> list[CellResult]:
    """Run every cell of ``plan`` in order and, if it has an output directory,
    write the CSV tables and ``manifest.json`` there.

    ``on_cell`` is called with each finished CellResult. A cell exceeding the
    failure threshold stops the run; results gathered so far are still written.
    """
    if plan.output_dir is not None:
        _check_writable(Path(plan.output_dir))
    cells = []
    try:
        for i, cfg in enumerate(plan.cells):
            cell = run_cell(cfg, plan.specs, plan.rng_policy, plan.workers, i, plan.strict_paper)
            cells.append(cell)
            if on_cell is not None:
                on_cell(cell)
    except ExcessiveFailures as exc:
        if exc.result is not None:
            cells.append(exc.result)
        if plan.output_dir is not None:
            write_outputs(plan, cells, Path(plan.output_dir))
        raise
    if plan.output_dir is not None:
        write_outputs(plan, cells, Path(plan.output_dir))
    return cells
