"""Run configuration files (TOML, or JSON by extension) and their validation."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, replace
from pathlib import Path

from .datagen import (
    DEFAULT_ITERATIONS,
    DEFAULT_PERIODS,
    CaseSpec,
    SimulationConfig,
    build_joint_distribution,
)
from .errors import ConfigError, MetaRegError
from .estimators import ALL_SPECS, SpecKind
from .harness import RNG_POLICIES, ExperimentPlan

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

DEFAULT_SEED = 20240521
DEFAULT_OUTPUT = "metareg_out"
FORMATS = ("csv",)

_SECTIONS = {
    "experiment": {
        "cases", "n", "k", "iterations", "seed", "alpha", "specs", "periods", "rng_policy", "workers", "strict_paper",
    },
    "output": {"directory", "formats"},
    "overrides": {"allow_custom", "covariance", "covariate_means", "location_means", "time_increment"},
}


@dataclass(frozen=True)
class RunConfig:
    cells: tuple
    specs: tuple = ALL_SPECS
    output_dir: Path = Path(DEFAULT_OUTPUT)
    formats: tuple = FORMATS
    workers: int = 1
    rng_policy: str = "common"
    strict_paper: bool = False

    def plan(self) -> ExperimentPlan:
        return ExperimentPlan(self.cells, self.specs, self.output_dir, self.workers, self.rng_policy, self.strict_paper)

    def with_overrides(self, iterations=None, seed=None, specs=None, strict_paper=None, output_dir=None) -> "RunConfig":
        cells = self.cells
        if iterations is not None or seed is not None:
            changes = {}
            if iterations is not None:
                changes["iterations"] = iterations
            if seed is not None:
                changes["seed"] = seed
            cells = tuple(_rebuild(c, "experiment", **changes) for c in cells)
        out = self
        if specs is not None:
            out = replace(out, specs=parse_specs(specs))
        if strict_paper is not None:
            out = replace(out, strict_paper=bool(strict_paper))
        if output_dir is not None:
            out = replace(out, output_dir=Path(output_dir))
        return replace(out, cells=cells)


def _rebuild(cfg, section, **kw):
    try:
        return cfg.with_updates(**kw)
    except ConfigError as exc:
        raise ConfigError(f"{section}.{exc.field}", str(exc).split(": ", 1)[-1]) from None


def parse_specs(value) -> tuple:
    if isinstance(value, str):
        if value.strip().lower() == "all":
            return ALL_SPECS
        value = [v for v in value.split(",") if v.strip()]
    if not isinstance(value, (list, tuple)) or not value:
        raise ConfigError("experiment.specs", "expected a non-empty list of spec names")
    try:
        specs = tuple(SpecKind.parse(str(v).strip()) for v in value)
    except (ValueError, MetaRegError) as exc:
        raise ConfigError("experiment.specs", str(exc)) from None
    if len(set(specs)) != len(specs):
        raise ConfigError("experiment.specs", "duplicate spec names")
    return specs


def _int_list(section: dict, key: str, default) -> list[int]:
    value = section.get(key, default)
    values = value if isinstance(value, list) else [value]
    if not values:
        raise ConfigError(f"experiment.{key}", "must not be empty")
    for v in values:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"experiment.{key}", f"expected integers, got {v!r}")
    return values


def _number(section: dict, key: str, default, kind=float, where="experiment"):
    v = section.get(key, default)
    ok = isinstance(v, (int, float)) and not isinstance(v, bool)
    if kind is int:
        ok = isinstance(v, int) and not isinstance(v, bool)
    if not ok:
        raise ConfigError(f"{where}.{key}", f"expected a number, got {v!r}")
    return kind(v)


def _bool(section: dict, key: str, where: str) -> bool:
    v = section.get(key, False)
    if not isinstance(v, bool):
        raise ConfigError(f"{where}.{key}", f"expected true or false, got {v!r}")
    return v


def parse_config(doc: dict) -> RunConfig:
    """Validate a parsed configuration document and expand its grid of cells."""
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level must be a table")
    for name, body in doc.items():
        if name not in _SECTIONS:
            raise ConfigError(name, "unknown section")
        if not isinstance(body, dict):
            raise ConfigError(name, "must be a table")
        unknown = set(body) - _SECTIONS[name]
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(f"{name}.{key}", "unknown key")
    exp = doc.get("experiment", {})
    out = doc.get("output", {})
    ovr = doc.get("overrides", {})

    allow_custom = _bool(ovr, "allow_custom", "overrides")
    ns = _int_list(exp, "n", 100)
    ks = _int_list(exp, "k", 1)
    iterations = _number(exp, "iterations", DEFAULT_ITERATIONS, int)
    seed = _number(exp, "seed", DEFAULT_SEED, int)
    alpha = _number(exp, "alpha", 0.05)
    periods = _number(exp, "periods", DEFAULT_PERIODS, int)
    if periods != DEFAULT_PERIODS and not allow_custom:
        raise ConfigError("experiment.periods", f"must be {DEFAULT_PERIODS} unless overrides.allow_custom = true")
    workers = _number(exp, "workers", 1, int)
    rng_policy = exp.get("rng_policy", "common")
    if rng_policy not in RNG_POLICIES:
        raise ConfigError("experiment.rng_policy", f"{rng_policy!r} not in {RNG_POLICIES}")
    strict_paper = _bool(exp, "strict_paper", "experiment")
    specs = parse_specs(exp.get("specs", "all"))

    if "location_means" in ovr or "time_increment" in ovr:
        if not allow_custom:
            raise ConfigError("overrides.location_means", "custom cases require overrides.allow_custom = true")
        if "location_means" not in ovr or "time_increment" not in ovr:
            raise ConfigError("overrides.location_means", "give both location_means and time_increment")
        means = ovr["location_means"]
        if not isinstance(means, list) or not all(isinstance(m, (int, float)) for m in means):
            raise ConfigError("overrides.location_means", "expected a list of numbers")
        cases = [CaseSpec.custom(means, _number(ovr, "time_increment", 0.0, where="overrides"))]
    else:
        case_ids = _int_list(exp, "cases", [1])
        try:
            cases = [CaseSpec.from_id(c) for c in case_ids]
        except ConfigError as exc:
            raise ConfigError("experiment.cases", str(exc).split(": ", 1)[-1]) from None

    distribution = None
    if "covariance" in ovr or "covariate_means" in ovr:
        if not allow_custom:
            raise ConfigError("overrides.covariance", "custom covariance requires overrides.allow_custom = true")
        if len(ks) != 1:
            raise ConfigError("experiment.k", "a custom covariance fixes k; give a single value")
        try:
            distribution = build_joint_distribution(ks[0], ovr.get("covariance"), ovr.get("covariate_means"))
        except (MetaRegError, ValueError, TypeError) as exc:
            raise ConfigError("overrides.covariance", str(exc)) from None

    cells = []
    for case, n, k in itertools.product(cases, ns, ks):
        try:
            cells.append(SimulationConfig(
                case, n=n, k=k, periods=periods, iterations=iterations, seed=seed, alpha=alpha,
                allow_custom=allow_custom, distribution=distribution,
            ))
        except ConfigError as exc:
            raise ConfigError(f"experiment.{exc.field}", str(exc).split(": ", 1)[-1]) from None
        except MetaRegError as exc:
            raise ConfigError("experiment", str(exc)) from None

    directory = Path(out.get("directory", DEFAULT_OUTPUT))
    formats = out.get("formats", list(FORMATS))
    if not isinstance(formats, list) or any(f not in FORMATS for f in formats):
        raise ConfigError("output.formats", f"supported formats: {FORMATS}")
    plan = ExperimentPlan(tuple(cells), specs, directory, workers, rng_policy, strict_paper)
    return RunConfig(plan.cells, plan.specs, directory, tuple(formats), workers, rng_policy, strict_paper)


def load_config(path) -> RunConfig:
    """Read a TOML (or ``.json``) run configuration.

    Relative output directories resolve against the current directory.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    try:
        if path.suffix.lower() == ".json":
            doc = json.loads(raw.decode("utf-8"))
        else:
            doc = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError("config", f"cannot parse {path.name}: {exc}") from None
    return parse_config(doc)
