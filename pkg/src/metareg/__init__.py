"""Meta-regression simulation laboratory.

Ten weighted least-squares meta-regression specifications, a data-generating
process with joint location/time heterogeneity, and a Monte Carlo harness that
scores each specification by power, bias, variance and interval precision.
"""

__version__ = "0.1.0"

from .datagen import (  # noqa: E402
    CaseSpec,
    MetaDataset,
    SimulationConfig,
    build_joint_distribution,
    derive_true_slopes,
    sample_dataset,
    true_parameters,
)
from .estimators import ALL_SPECS, SpecKind, fit, fit_all  # noqa: E402
from .harness import ExperimentPlan, run_cell, run_experiment  # noqa: E402
from .metrics import adjust_alpha, power_curve  # noqa: E402

__all__ = [
    "ALL_SPECS",
    "CaseSpec",
    "ExperimentPlan",
    "MetaDataset",
    "SimulationConfig",
    "SpecKind",
    "adjust_alpha",
    "build_joint_distribution",
    "derive_true_slopes",
    "fit",
    "fit_all",
    "power_curve",
    "run_cell",
    "run_experiment",
    "sample_dataset",
    "true_parameters",
]
