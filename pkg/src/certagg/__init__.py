"""Estimate a federated model's certified accuracy on a target label distribution
from per-client certified curves and label distributions."""

from .core import (
    CertifiedCurve,
    ClientRecord,
    DimensionError,
    GridError,
    LabelDistribution,
    RadiusGrid,
    SimplexWeights,
    ValidationError,
    combine_curves,
    l2_distance,
    mix_distributions,
    residual,
)
from .estimators import EstimateReport, EstimatorConfig, estimate_ap, estimate_ga, estimate_vw
from .grouping import GroupingConfig, group_clients, virtualize
from .simplexopt import project_simplex, solve_simplex_ls

__version__ = "0.1.0"
