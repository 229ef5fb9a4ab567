"""Command-line entry point: ``metareg {simulate,gen,extract,power}``.

Exit codes: 0 success, 2 invalid configuration, 3 too many failed fits in a
cell, 4 unreadable or invalid input data.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import DEFAULT_SEED, RunConfig, load_config, parse_config
from .datagen import CaseSpec, sample_dataset, true_parameters
from .errors import (
    ConfigError,
    DegenerateVariable,
    DomainError,
    ExcessiveFailures,
    InsufficientGroups,
    ParseError,
    ValidationError,
)
from .estimators import SpecKind
from .extract import extract_parameters, heterogeneity_diagnostics, load_dataset
from .harness import FIT_SUMMARY_COLUMNS, cell_key, child_stream, run_experiment, write_csv
from .metrics import power_curve

EXIT_OK, EXIT_CONFIG, EXIT_FAILURES, EXIT_DATA = 0, 2, 3, 4
POWER_COLUMNS = ("spec", "discrepancy", "power")

log = logging.getLogger("metareg")


def _seed(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def _run_config(args) -> RunConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = parse_config({})
    return cfg.with_overrides(
        iterations=args.iterations,
        seed=args.seed,
        specs=args.specs,
        strict_paper=True if args.strict_paper else None,
        output_dir=getattr(args, "out", None),
    )


def cmd_simulate(args) -> int:
    cfg = _run_config(args)
    plan = cfg.plan()
    log.info("running %d cell(s) into %s", len(plan.cells), plan.output_dir)

    def report(cell):
        print(cell.summary_line(), flush=True)
        log.info("%s finished in %.1f s", cell.label, cell.wall_time)

    try:
        run_experiment(plan, on_cell=report)
    except ExcessiveFailures as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURES
    return EXIT_OK


def cmd_gen(args) -> int:
    cfg = _run_config(args)
    cell = cfg.cells[0]
    changes = {k: v for k, v in (("n", args.n), ("k", args.k)) if v is not None}
    if args.case is not None:
        changes["case"] = CaseSpec.from_id(args.case)
    if changes:
        try:
            cell = cell.with_updates(**changes)
        except ConfigError as exc:
            raise ConfigError(f"experiment.{exc.field}", str(exc).split(": ", 1)[-1]) from None
    # Iteration 0 of the cell's stream, so the file matches the harness's first draw.
    data = sample_dataset(cell, child_stream(cell.seed, cell_key(cell, cfg.rng_policy), 0))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.to_csv(out)
    truth = true_parameters(cell)
    payload = {
        "case": cell.case.case_id,
        "n": cell.n,
        "k": cell.k,
        "beta": truth.slopes.tolist(),
        "sigma2": truth.sigma2,
        "trend_slope": truth.trend_slope,
        "intercepts": truth.intercepts.tolist(),
    }
    print(json.dumps(payload))
    return EXIT_OK


def cmd_extract(args) -> int:
    data = load_dataset(args.data)
    params = extract_parameters(data)
    report = heterogeneity_diagnostics(data)
    out = Path(args.out) if args.out else Path(args.data).parent
    out.mkdir(parents=True, exist_ok=True)
    params.to_json(out / "parameters.json")
    text = report.to_text()
    (out / "diagnostics.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def read_fit_summary(path) -> list[dict]:
    """Rows of a ``fit_summary.csv`` for one cell, one per spec (slope x1)."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.DictReader(fh)
        missing = [c for c in FIT_SUMMARY_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ParseError(f"missing columns {missing}", row=1)
        rows, cells, specs = [], set(), set()
        for row_no, raw in enumerate(reader, start=2):
            if raw["param"] != "x1":
                continue
            try:
                spec = SpecKind.parse(raw["spec"])
            except ValueError as exc:
                raise ParseError(str(exc), row=row_no, column="spec") from None
            parsed = {"spec": spec}
            for col, kind in (("mean_se", float), ("df", int), ("alpha", float)):
                try:
                    parsed[col] = kind(raw[col])
                except (TypeError, ValueError):
                    raise ParseError(f"bad value {raw[col]!r}", row=row_no, column=col) from None
            if not (parsed["mean_se"] > 0 and np.isfinite(parsed["mean_se"])):
                raise ParseError("mean_se must be positive", row=row_no, column="mean_se")
            if parsed["df"] < 1:
                raise ParseError("df must be at least 1", row=row_no, column="df")
            if not 0 < parsed["alpha"] < 1:
                raise ParseError("alpha must lie in (0, 1)", row=row_no, column="alpha")
            if spec in specs:
                raise ParseError(f"duplicate spec {spec.value}", row=row_no, column="spec")
            specs.add(spec)
            cells.add((raw["case"], raw["n"], raw["k"]))
            rows.append(parsed)
    if not rows:
        raise ParseError("no x1 rows found")
    if len(cells) > 1:
        raise ParseError(f"input holds {len(cells)} cells; pass one cell's fit_summary.csv")
    return rows


def cmd_power(args) -> int:
    rows = read_fit_summary(args.fit_summary)
    out_dir = Path(args.out) if args.out else Path(args.fit_summary).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    table = []
    for r in rows:
        try:
            curve = power_curve(r["mean_se"], r["df"], r["alpha"])
        except DomainError as exc:
            raise ParseError(f"{r['spec'].value}: {exc}") from None
        table += [(r["spec"].value, d, p) for d, p in zip(curve.discrepancy, curve.power)]
    path = write_csv(out_dir / "power_curve.csv", POWER_COLUMNS, table)
    print(f"wrote {len(table)} rows to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metareg", description="Meta-regression simulation laboratory")
    parser.add_argument("--version", action="version", version=f"metareg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress and timings to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p, out_help):
        p.add_argument("--config", type=Path, help="TOML (or .json) run configuration")
        p.add_argument("--out", help=out_help)
        p.add_argument("--iterations", type=_positive)
        p.add_argument("--seed", type=_seed, help=f"master seed (default {DEFAULT_SEED})")
        p.add_argument("--specs", help="comma-separated spec names, or 'all'")
        p.add_argument("--strict-paper", action="store_true", help="use the uncorrected lambda and scalar SE formulas")

    p = sub.add_parser("simulate", help="run the Monte Carlo experiment")
    run_flags(p, "output directory (overrides output.directory)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gen", help="write one sampled dataset and print its true parameters")
    run_flags(p, "CSV path for the dataset")
    p.add_argument("--case", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("extract", help="calibrate parameters and run diagnostics on a dataset")
    p.add_argument("data", type=Path)
    p.add_argument("--out", help="directory for parameters.json and diagnostics.txt")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("power", help="power curves from a cell's fit_summary.csv")
    p.add_argument("fit_summary", type=Path)
    p.add_argument("--out", help="directory for power_curve.csv")
    p.set_defaults(func=cmd_power)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gen" and not args.out:
        parser.error("gen requires --out")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, ValidationError, DegenerateVariable, InsufficientGroups) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
