"""Calibration from real meta-regression data and pre-modelling diagnostics.

Load a subject-level CSV, extract the moments needed to simulate look-alike
data, and screen for location and time heterogeneity before choosing a
specification.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .datagen import MetaDataset
from .errors import (
    DegenerateVariable,
    InsufficientGroups,
    MissingValue,
    NotPositiveDefinite,
    ParseError,
    ValidationError,
)
from .numerics import cholesky, mvn_sample

_COVARIATE = re.compile(r"x([1-9][0-9]*)$")
JSON_KEYS = ("means", "variances", "covariance", "location_mu_y", "time_mu_y", "cells")


def _check_header(header: list[str]) -> int:
    header = [h.strip() for h in header]
    if len(header) < 5 or header[0] != "y" or header[-3:] != ["study", "location", "time"]:
        raise ParseError("header must be y,x1..xk,study,location,time", row=1)
    for j, name in enumerate(header[1:-3], start=1):
        m = _COVARIATE.match(name)
        if not m or int(m.group(1)) != j:
            raise ParseError(f"expected covariate column 'x{j}', found {name!r}", row=1, column=name)
    return len(header) - 4


def _dense(labels: list[str], numeric: bool):
    """Map labels to 0..G-1 in sorted order (numeric order when possible)."""
    uniq = sorted(set(labels), key=(lambda s: float(s)) if numeric else None)
    index = {lab: i for i, lab in enumerate(uniq)}
    return np.array([index[lab] for lab in labels], dtype=np.int64)


def _all_numeric(labels) -> bool:
    try:
        for lab in set(labels):
            float(lab)
    except ValueError:
        return False
    return True


def load_dataset(path) -> MetaDataset:
    """Parse a ``y,x1..xk,study,location,time`` CSV into a MetaDataset.

    Study and location labels may be any tokens and are re-indexed densely
    (0-based); time labels must be integers and become 1..T in sorted order.
    Row numbers in errors count the header as row 1.
    """
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("file is empty", row=1) from None
        k = _check_header(header)
        names = [h.strip() for h in header]
        values, studies, locations, times, row_nos = [], [], [], [], []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(names):
                raise ParseError(f"expected {len(names)} fields, found {len(row)}", row=row_no)
            row = [f.strip() for f in row]
            for name, f in zip(names, row):
                if f == "" or f.lower() in ("na", "nan"):
                    raise MissingValue("missing value", row=row_no, column=name)
            nums = []
            for name, f in zip(names[: k + 1], row[: k + 1]):
                try:
                    v = float(f)
                except ValueError:
                    raise ParseError(f"not a number: {f!r}", row=row_no, column=name) from None
                if not np.isfinite(v):
                    raise ParseError(f"non-finite value {f!r}", row=row_no, column=name)
                nums.append(v)
            try:
                t = int(row[-1])
            except ValueError:
                raise ParseError(f"time must be an integer, got {row[-1]!r}", row=row_no, column="time") from None
            values.append(nums)
            studies.append(row[-3])
            locations.append(row[-2])
            times.append(t)
            row_nos.append(row_no)
    if len(values) < 2:
        raise ParseError("need at least two data rows")

    arr = np.array(values)
    study = _dense(studies, _all_numeric(studies))
    location = _dense(locations, _all_numeric(locations))
    time = _dense([str(t) for t in times], True) + 1

    for name, labels in (("location", location), ("time", time)):
        _, first_row = np.unique(study, return_index=True)
        bad = np.flatnonzero(labels[first_row][study] != labels)
        if bad.size:
            i = int(bad[0])
            raise ValidationError(
                f"row {row_nos[i]}: study {studies[i]!r} appears under more than one {name}; "
                f"each study must belong to exactly one {name}"
            )
    return MetaDataset(arr[:, 0], arr[:, 1:], study, location, time, provenance={"source": str(path)})


@dataclass(frozen=True, eq=False)
class ExtractedParameters:
    """Moments of (y, x1..xk) plus outcome means by location and by period."""

    names: tuple
    means: np.ndarray
    variances: np.ndarray
    covariance: np.ndarray
    location_mu_y: np.ndarray
    time_mu_y: np.ndarray
    cells: np.ndarray  # (L, T) row counts

    @property
    def k(self) -> int:
        return len(self.names) - 1

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "covariance": self.covariance.tolist(),
            "location_mu_y": self.location_mu_y.tolist(),
            "time_mu_y": self.time_mu_y.tolist(),
            "cells": self.cells.astype(int).tolist(),
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractedParameters":
        missing = [key for key in JSON_KEYS if key not in d]
        if missing:
            raise ValidationError(f"missing keys: {missing}")
        means = np.asarray(d["means"], dtype=float)
        names = ("y",) + tuple(f"x{j}" for j in range(1, means.size))
        return cls(
            names,
            means,
            np.asarray(d["variances"], dtype=float),
            np.asarray(d["covariance"], dtype=float),
            np.asarray(d["location_mu_y"], dtype=float),
            np.asarray(d["time_mu_y"], dtype=float),
            np.asarray(d["cells"], dtype=np.int64),
        )


def _group_mean(values, groups, n_groups):
    counts = np.bincount(groups, minlength=n_groups)
    sums = np.bincount(groups, weights=values, minlength=n_groups)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def extract_parameters(data: MetaDataset) -> ExtractedParameters:
    """Sample means and (n - 1)-divisor covariances of all variables,
    including the outcome, plus per-location and per-period outcome means."""
    if data.n_obs < 2:
        raise DegenerateVariable("need at least two rows")
    Z = np.column_stack([data.y, data.x])
    names = tuple(data.columns()[: Z.shape[1]])
    cov = np.cov(Z, rowvar=False, ddof=1)
    cov = np.atleast_2d(0.5 * (cov + cov.T))
    var = np.diag(cov).copy()
    scale = np.maximum(np.abs(Z).max(axis=0), 1.0)
    flat = var <= (1e-14 * scale) ** 2
    if flat.any():
        raise DegenerateVariable(f"constant variable(s): {[n for n, f in zip(names, flat) if f]}")
    L, T = data.n_locations, data.n_periods
    cells = np.bincount(data.location * T + (data.time - 1), minlength=L * T).reshape(L, T)
    return ExtractedParameters(
        names,
        Z.mean(axis=0),
        var,
        cov,
        _group_mean(data.y, data.location, L),
        _group_mean(data.y, data.time - 1, T),
        cells,
    )


def resimulate(params: ExtractedParameters, rng, n_per_cell: int | None = None) -> MetaDataset:
    """Draw a synthetic dataset that mimics ``params``.

    Cell (l, t) gets outcome mean ``location_mu_y[l] + time_mu_y[t] - mean(y)``
    and the outcome variance is reduced by the spread of those cell means so
    that the overall moments match the extracted ones. Row counts follow
    ``params.cells`` unless ``n_per_cell`` is given.
    """
    L, T = params.cells.shape
    counts = params.cells if n_per_cell is None else np.full((L, T), int(n_per_cell))
    if np.isnan(params.location_mu_y).any() or np.isnan(params.time_mu_y).any():
        raise ValidationError("every location and period needs at least one row")
    cell_mu = params.location_mu_y[:, None] + params.time_mu_y[None, :] - params.means[0]
    w = counts / counts.sum()
    spread = float(np.sum(w * (cell_mu - np.sum(w * cell_mu)) ** 2))
    within = params.covariance.copy()
    within[0, 0] -= spread
    try:
        cholesky(within)
    except NotPositiveDefinite:
        raise DegenerateVariable("outcome variance is too small for the observed cell-mean spread") from None

    flat_counts = counts.ravel()
    cell = np.repeat(np.arange(L * T), flat_counts)
    keep = flat_counts > 0
    study_of_cell = np.cumsum(keep) - 1
    draws = mvn_sample(np.zeros(len(params.names)), within, int(flat_counts.sum()), rng)
    y = draws[:, 0] + cell_mu.ravel()[cell]
    x = draws[:, 1:] + params.means[1:]
    return MetaDataset(y, x, study_of_cell[cell], cell // T, cell % T + 1, provenance={"source": "resimulated"})


@dataclass(frozen=True)
class FTest:
    statistic: float
    pvalue: float
    df_between: int
    df_within: int


def one_way_f(values, groups) -> FTest:
    """One-way ANOVA F test of equal group means."""
    values = np.asarray(values, dtype=float)
    groups = np.asarray(groups)
    labels = np.unique(groups)
    if labels.size < 2:
        raise InsufficientGroups(f"need at least two groups, found {labels.size}")
    samples = [values[groups == g] for g in labels]
    if values.size - labels.size < 1:
        raise InsufficientGroups("no within-group degrees of freedom")
    res = stats.f_oneway(*samples)
    return FTest(float(res.statistic), float(res.pvalue), int(labels.size - 1), int(values.size - labels.size))


@dataclass(frozen=True)
class NormalityCheck:
    variable: str
    skew_z: float
    kurtosis_z: float


@dataclass(frozen=True, eq=False)
class DiagnosticsReport:
    location_test: FTest | None
    time_test: FTest | None
    location_summary: np.ndarray  # rows (mean, sd, n) per location
    trend_deltas: np.ndarray  # (L, T-1) period-to-period change in mean y
    normality: tuple
    notes: dict = field(default_factory=dict)

    def advice(self, level: float = 0.05) -> list[str]:
        """Advisory reading of the tests; not an automated model choice."""
        loc = self.location_test is not None and self.location_test.pvalue < level
        tim = self.time_test is not None and self.time_test.pvalue < level
        if loc and tim:
            return [
                "heterogeneity in both location and time: prefer specs that control both, "
                "e.g. FE_lTrend (location effects plus a trend), FE_s or RE_s",
                "avoid FE_t and the location-only specs",
            ]
        if loc:
            return ["location heterogeneity only: location-level or study-level controls are adequate"]
        if tim:
            return ["time heterogeneity only: study-level controls or a trend term; avoid location-only specs"]
        return ["no heterogeneity detected at this level: study-level RE_s or FE_s are safe defaults"]

    def to_text(self) -> str:
        lines = ["heterogeneity tests (one-way F on y)"]
        for name, test in (("location", self.location_test), ("time", self.time_test)):
            if test is None:
                lines.append(f"  {name:<9} not run: {self.notes.get(name, '')}")
            else:
                lines.append(
                    f"  {name:<9} F({test.df_between}, {test.df_within}) = {test.statistic:.4f}  p = {test.pvalue:.4g}"
                )
        lines.append("")
        lines.append(f"  {'location':>8} {'mean':>12} {'sd':>12} {'n':>8}")
        for i, (m, sd, n) in enumerate(self.location_summary):
            lines.append(f"  {i:>8d} {m:>12.4f} {sd:>12.4f} {int(n):>8d}")
        if self.trend_deltas.size:
            lines.append("")
            lines.append("  mean change in y between consecutive periods, by location")
            for i, row in enumerate(self.trend_deltas):
                lines.append(f"  {i:>8d} " + " ".join(f"{d:>9.4f}" for d in row))
        lines.append("")
        lines.append(f"  {'variable':>8} {'skew z':>10} {'kurt z':>10}")
        for chk in self.normality:
            lines.append(f"  {chk.variable:>8} {chk.skew_z:>10.3f} {chk.kurtosis_z:>10.3f}")
        lines.append("")
        lines += [f"advice: {a}" for a in self.advice()]
        return "\n".join(lines) + "\n"


def _normality(name: str, v: np.ndarray) -> NormalityCheck:
    # scipy's skewness test needs 8 rows; its kurtosis test is unreliable below 20.
    skew = float(stats.skewtest(v).statistic) if v.size >= 8 else float("nan")
    kurt = float(stats.kurtosistest(v).statistic) if v.size >= 20 else float("nan")
    return NormalityCheck(name, skew, kurt)


def heterogeneity_diagnostics(data: MetaDataset) -> DiagnosticsReport:
    """F tests for outcome differences across locations and across periods,
    descriptive tables, and per-variable skewness/kurtosis z-scores."""
    tests, notes = {}, {}
    for name, groups in (("location", data.location), ("time", data.time)):
        try:
            tests[name] = one_way_f(data.y, groups)
        except InsufficientGroups as exc:
            tests[name] = None
            notes[name] = str(exc)
    if tests["location"] is None and tests["time"] is None:
        raise InsufficientGroups("need at least two locations or two periods")

    L, T = data.n_locations, data.n_periods
    summary = np.empty((L, 3))
    for loc in range(L):
        yl = data.y[data.location == loc]
        sd = float(np.std(yl, ddof=1)) if yl.size > 1 else float("nan")
        summary[loc] = (yl.mean() if yl.size else np.nan, sd, yl.size)
    cell_means = _group_mean(data.y, data.location * T + (data.time - 1), L * T).reshape(L, T)
    deltas = np.diff(cell_means, axis=1)

    Z = np.column_stack([data.y, data.x])
    names = data.columns()[: Z.shape[1]]
    normality = tuple(_normality(n, Z[:, j]) for j, n in enumerate(names))
    return DiagnosticsReport(tests["location"], tests["time"], summary, deltas, normality, notes)
