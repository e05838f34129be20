"""Shared value types and the linear-combination identities for certified curves.

Every type here is an immutable value: arrays are copied on construction and
marked read-only, so records can be shared freely between workers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

SUM_TOL = 1e-9
CURVE_TOL = 1e-12


class ValidationError(ValueError):
    """Input violates a type invariant or an operation precondition."""


class DimensionError(ValidationError):
    """Operands disagree on the number of classes or the number of entries."""


class GridError(ValidationError):
    """Curves were defined on different radius grids."""


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LabelDistribution:
    """Probability mass over a fixed set of ``M >= 2`` classes."""

    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 1 or p.size < 2:
            raise ValidationError(f"a label distribution needs >= 2 classes, got shape {p.shape}")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValidationError("label distribution entries must be finite and non-negative")
        if abs(p.sum() - 1.0) > SUM_TOL:
            raise ValidationError(f"label distribution sums to {p.sum():.12g}, not 1")
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_counts(cls, counts) -> "LabelDistribution":
        """Normalize non-negative class counts (the one place renormalization happens)."""
        c = np.asarray(counts, dtype=float)
        total = c.sum()
        if c.ndim != 1 or np.any(c < 0) or total <= 0:
            raise ValidationError("class counts must be non-negative with a positive total")
        return cls(c / total)

    @classmethod
    def uniform(cls, num_classes: int) -> "LabelDistribution":
        return cls(np.full(num_classes, 1.0 / num_classes))

    @property
    def num_classes(self) -> int:
        return self.probs.size

    def __eq__(self, other):
        if not isinstance(other, LabelDistribution):
            return NotImplemented
        return self.probs.shape == other.probs.shape and bool(np.all(self.probs == other.probs))

    def __hash__(self):
        return hash(self.probs.tobytes())


@dataclass(frozen=True, eq=False)
class RadiusGrid:
    """Strictly increasing l2 radii starting at 0."""

    radii: np.ndarray

    def __post_init__(self):
        r = _frozen(self.radii)
        if r.ndim != 1 or r.size < 1:
            raise ValidationError("radius grid must be a non-empty vector")
        if r[0] != 0.0:
            raise ValidationError("radius grid must start at 0")
        if np.any(np.diff(r) <= 0):
            raise ValidationError("radius grid must be strictly increasing")
        object.__setattr__(self, "radii", r)

    @classmethod
    def uniform(cls, steps: int = 20, max_radius: float = 1.0) -> "RadiusGrid":
        """Grid ``{0, max/steps, 2 max/steps, ..., max}``."""
        if steps < 1 or max_radius <= 0:
            raise ValidationError("grid needs steps >= 1 and a positive max radius")
        return cls(np.arange(steps + 1) * (max_radius / steps))

    def __len__(self):
        return self.radii.size

    def __eq__(self, other):
        if not isinstance(other, RadiusGrid):
            return NotImplemented
        return self.radii.shape == other.radii.shape and bool(np.all(self.radii == other.radii))

    def __hash__(self):
        return hash(self.radii.tobytes())


@dataclass(frozen=True, eq=False)
class CertifiedCurve:
    """Certified accuracy at each radius of a grid; non-increasing in radius."""

    grid: RadiusGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (len(self.grid),):
            raise GridError(f"curve has {v.shape} values for a grid of {len(self.grid)} radii")
        if np.any(v < -CURVE_TOL) or np.any(v > 1 + CURVE_TOL) or not np.all(np.isfinite(v)):
            raise ValidationError("certified accuracy values must lie in [0, 1]")
        if np.any(np.diff(v) > CURVE_TOL):
            raise ValidationError("certified curve must be non-increasing in radius")
        object.__setattr__(self, "values", _frozen(np.clip(v, 0.0, 1.0)))

    @classmethod
    def constant(cls, grid: RadiusGrid, value: float) -> "CertifiedCurve":
        return cls(grid, np.full(len(grid), float(value)))

    def __eq__(self, other):
        if not isinstance(other, CertifiedCurve):
            return NotImplemented
        return self.grid == other.grid and bool(np.all(self.values == other.values))

    def __hash__(self):
        return hash((self.grid, self.values.tobytes()))


@dataclass(frozen=True)
class ClientRecord:
    """What a client reports: its id, test-set size, label distribution and certified curve."""

    id: Hashable
    n: int
    dist: LabelDistribution
    curve: CertifiedCurve

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValidationError(f"client {self.id!r}: sample count must be a positive integer")
        object.__setattr__(self, "n", int(self.n))


@dataclass(frozen=True, eq=False)
class SimplexWeights:
    """Aggregation coefficients on the probability simplex."""

    alphas: np.ndarray

    def __post_init__(self):
        a = _frozen(self.alphas)
        if a.ndim != 1 or a.size < 1:
            raise ValidationError("simplex weights must be a non-empty vector")
        if not np.all(np.isfinite(a)) or np.any(a < 0) or np.any(a > 1):
            raise ValidationError("simplex weights must lie in [0, 1]")
        if abs(a.sum() - 1.0) > SUM_TOL:
            raise ValidationError(f"simplex weights sum to {a.sum():.12g}, not 1")
        object.__setattr__(self, "alphas", a)

    @classmethod
    def from_volumes(cls, volumes) -> "SimplexWeights":
        v = np.asarray(volumes, dtype=float)
        if v.ndim != 1 or v.size < 1 or np.any(v < 0) or v.sum() <= 0:
            raise ValidationError("volumes must be non-negative with a positive total")
        return cls(v / v.sum())

    def __len__(self):
        return self.alphas.size

    def __eq__(self, other):
        if not isinstance(other, SimplexWeights):
            return NotImplemented
        return self.alphas.shape == other.alphas.shape and bool(np.all(self.alphas == other.alphas))

    def __hash__(self):
        return hash(self.alphas.tobytes())


def _as_weights(weights) -> SimplexWeights:
    return weights if isinstance(weights, SimplexWeights) else SimplexWeights(weights)


def _check_classes(dists: Sequence[LabelDistribution]) -> int:
    if not dists:
        raise DimensionError("at least one distribution is required")
    m = dists[0].num_classes
    for d in dists[1:]:
        if d.num_classes != m:
            raise DimensionError(f"class count mismatch: {d.num_classes} != {m}")
    return m


def mix_distributions(weights, dists: Sequence[LabelDistribution]) -> LabelDistribution:
    """Return ``sum_i alpha_i p(D_i)``."""
    w = _as_weights(weights)
    if len(w) != len(dists):
        raise DimensionError(f"{len(w)} weights for {len(dists)} distributions")
    _check_classes(dists)
    mixed = w.alphas @ np.stack([d.probs for d in dists])
    return LabelDistribution(mixed)


def combine_curves(weights, curves: Sequence[CertifiedCurve]) -> CertifiedCurve:
    """Pointwise convex combination of curves sharing one grid.

    With weights ``n_i / n`` this is exactly the curve of the pooled data.
    """
    w = _as_weights(weights)
    if len(w) != len(curves):
        raise DimensionError(f"{len(w)} weights for {len(curves)} curves")
    if not curves:
        raise DimensionError("at least one curve is required")
    grid = curves[0].grid
    for c in curves[1:]:
        if c.grid != grid:
            raise GridError("curves are defined on different radius grids")
    values = w.alphas @ np.stack([c.values for c in curves])
    # rounding can lift a flat segment by an ulp; keep the monotone invariant exact
    values = np.minimum.accumulate(values)
    return CertifiedCurve(grid, values)


def l2_distance(a: LabelDistribution, b: LabelDistribution) -> float:
    if a.num_classes != b.num_classes:
        raise DimensionError(f"class count mismatch: {a.num_classes} != {b.num_classes}")
    return float(np.linalg.norm(a.probs - b.probs))


def residual(target: LabelDistribution, weights, dists: Sequence[LabelDistribution]) -> float:
    """Distance between the target and the weighted mixture of ``dists``."""
    return l2_distance(target, mix_distributions(weights, dists))


def empirical_curve(robust_radii, grid: RadiusGrid) -> CertifiedCurve:
    """Fraction of samples whose robust radius reaches each grid radius.

    Samples that are never certified carry a negative radius and count as
    non-robust everywhere, including at radius 0.
    """
    radii = np.asarray(robust_radii, dtype=float)
    if radii.size == 0:
        raise ValidationError("cannot build a curve from zero samples")
    sorted_radii = np.sort(radii)
    below = np.searchsorted(sorted_radii, grid.radii, side="left")
    return CertifiedCurve(grid, (radii.size - below) / radii.size)


def seed_sequence(seed, *keys) -> np.random.SeedSequence:
    """Child seed for one task, keyed by a stream tag and task indices.

    Tasks get their own stream regardless of execution order, which is what
    lets any worker count reproduce the same results.
    """
    return np.random.SeedSequence([int(seed), *(int(k) for k in keys)])


def derive_seed(seed, *keys) -> int:
    return int(seed_sequence(seed, *keys).generate_state(1, dtype=np.uint64)[0])


# stream tags for seed_sequence
STREAM_DIRICHLET = 0
STREAM_PARETO = 1
STREAM_CLIENT = 2
STREAM_ITERATION = 3
STREAM_POINT = 4
STREAM_ORACLE = 5
STREAM_TARGET = 6
STREAM_BLOBS = 7
STREAM_HELDOUT = 8
STREAM_BOUND_CHECK = 9
