"""Curve error metrics."""

from __future__ import annotations

import numpy as np

from ..core import CertifiedCurve, GridError, ValidationError

MAPE_FLOOR = 1e-12


class UndefinedMetricError(ValidationError):
    """The metric has no finite value for these inputs."""


def _check(estimate: CertifiedCurve, truth: CertifiedCurve):
    if estimate.grid != truth.grid:
        raise GridError("estimate and truth are defined on different grids")


def metric_rmse(estimate: CertifiedCurve, truth: CertifiedCurve) -> float:
    _check(estimate, truth)
    return float(np.sqrt(np.mean((estimate.values - truth.values) ** 2)))


def metric_mape(estimate: CertifiedCurve, truth: CertifiedCurve) -> tuple[float, int]:
    """Mean absolute relative error and the number of radii skipped for a zero truth."""
    _check(estimate, truth)
    keep = truth.values > MAPE_FLOOR
    excluded = int((~keep).sum())
    if not keep.any():
        raise UndefinedMetricError("truth is zero at every radius; MAPE is undefined")
    rel = np.abs((estimate.values[keep] - truth.values[keep]) / truth.values[keep])
    return float(rel.mean()), excluded
