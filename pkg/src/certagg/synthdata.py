"""Synthetic federated populations with exactly known certified accuracy.

Client label skew comes from Dirichlet or Pareto partitions of per-class
sample totals. Robustness comes from an :class:`OracleModel` that fixes the
expected certified curve ``L_j(r)`` of each class, so the ground truth for any
label distribution is the exact mixture ``sum_j p_j L_j(r)``.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import Hashable, Iterator, Sequence

import numpy as np

from .core import (
    CertifiedCurve,
    ClientRecord,
    DimensionError,
    LabelDistribution,
    RadiusGrid,
    ValidationError,
    STREAM_CLIENT,
    STREAM_DIRICHLET,
    STREAM_PARETO,
    empirical_curve,
    seed_sequence,
)


class Scheme(str, enum.Enum):
    DIRICHLET = "dirichlet"
    PARETO = "pareto"


@dataclass(frozen=True)
class PartitionSpec:
    scheme: Scheme
    beta: float
    num_clients: int
    class_totals: tuple
    seed: int = 0
    x_m: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "class_totals", tuple(int(t) for t in self.class_totals))
        if not self.beta > 0:
            raise ValidationError("beta must be positive")
        if not self.x_m > 0:
            raise ValidationError("x_m must be positive")
        if self.num_clients < 1:
            raise ValidationError("need at least one client")
        if len(self.class_totals) < 2 or min(self.class_totals) < 1:
            raise ValidationError("need >= 2 classes, each with at least one sample")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be an unsigned 64-bit integer")

    @property
    def num_classes(self) -> int:
        return len(self.class_totals)


@dataclass(frozen=True)
class OracleModel:
    """Expected certified curve of each class, all on one grid."""

    per_class_curves: tuple

    def __post_init__(self):
        curves = tuple(self.per_class_curves)
        if len(curves) < 2:
            raise ValidationError("an oracle needs curves for at least two classes")
        grid = curves[0].grid
        if any(c.grid != grid for c in curves):
            raise ValidationError("oracle curves must share one grid")
        object.__setattr__(self, "per_class_curves", curves)

    @property
    def grid(self) -> RadiusGrid:
        return self.per_class_curves[0].grid

    @property
    def num_classes(self) -> int:
        return len(self.per_class_curves)

    def matrix(self) -> np.ndarray:
        """``(M, len(grid))`` array whose row ``j`` is ``L_j``."""
        return np.stack([c.values for c in self.per_class_curves])

    @classmethod
    def exponential(cls, grid: RadiusGrid, num_classes: int, seed,
                    amplitude=(0.3, 1.0), scale=(0.1, 1.0), prevalence=None) -> "OracleModel":
        """Curves ``a_j exp(-r / s_j)`` with ``a_j``, ``s_j`` drawn uniformly from the ranges.

        When ``prevalence`` (one weight per class) is given, the drawn
        amplitudes and scales are handed out by rank, so the most prevalent
        class gets the most robust curve, as for a model trained on that mix.
        """
        lo_a, hi_a = amplitude
        lo_s, hi_s = scale
        if not (0 <= lo_a <= hi_a <= 1 and 0 < lo_s <= hi_s):
            raise ValidationError("amplitude range must sit in [0, 1] and scale range be positive")
        rng = np.random.default_rng(seed)
        a = rng.uniform(lo_a, hi_a, num_classes)
        s = rng.uniform(lo_s, hi_s, num_classes)
        if prevalence is not None:
            prevalence = np.asarray(prevalence, dtype=float)
            if prevalence.shape != (num_classes,):
                raise DimensionError("need one prevalence weight per class")
            rank = np.argsort(np.argsort(-prevalence, kind="stable"), kind="stable")
            a = np.sort(a)[::-1][rank]
            s = np.sort(s)[::-1][rank]
        values = np.clip(a[:, None] * np.exp(-grid.radii[None, :] / s[:, None]), 0.0, 1.0)
        return cls(tuple(CertifiedCurve(grid, v) for v in values))


@dataclass(frozen=True)
class SampleRecord:
    class_label: int
    robust_radius: float


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Column-oriented sample records; ``robust_radius < 0`` means never certified."""

    labels: np.ndarray
    radii: np.ndarray

    def __len__(self):
        return self.labels.size

    def __iter__(self) -> Iterator[SampleRecord]:
        for y, r in zip(self.labels, self.radii):
            yield SampleRecord(int(y), float(r))

    @staticmethod
    def concat(sets: Sequence["SampleSet"]) -> "SampleSet":
        return SampleSet(np.concatenate([s.labels for s in sets]),
                         np.concatenate([s.radii for s in sets]))


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    quota = weights / weights.sum() * total
    base = np.floor(quota).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        # stable sort keeps ties in client order
        order = np.argsort(-(quota - base), kind="stable")
        base[order[:short]] += 1
    return base


def partition_dirichlet(spec: PartitionSpec) -> np.ndarray:
    """``(N, M)`` counts: per class, Dirichlet(beta) proportions then a multinomial split."""
    if spec.scheme is not Scheme.DIRICHLET:
        raise ValidationError("partition_dirichlet needs a Dirichlet spec")
    rng = np.random.default_rng(seed_sequence(spec.seed, STREAM_DIRICHLET))
    counts = np.zeros((spec.num_clients, spec.num_classes), dtype=np.int64)
    for j, total in enumerate(spec.class_totals):
        if spec.num_clients == 1:
            counts[0, j] = total
            continue
        pi = rng.dirichlet(np.full(spec.num_clients, spec.beta))
        if not np.all(np.isfinite(pi)) or pi.sum() <= 0:
            # very small beta can underflow every gamma draw; fall back to a single owner
            pi = np.zeros(spec.num_clients)
            pi[rng.integers(spec.num_clients)] = 1.0
        counts[:, j] = rng.multinomial(total, pi / pi.sum())
    return counts


def partition_pareto(spec: PartitionSpec) -> np.ndarray:
    """``(N, M)`` counts proportional to independent Pareto(x_m, beta) draws per client and class.

    Each class column is discretized by the largest-remainder method so it
    sums exactly to that class's total.
    """
    if spec.scheme is not Scheme.PARETO:
        raise ValidationError("partition_pareto needs a Pareto spec")
    rng = np.random.default_rng(seed_sequence(spec.seed, STREAM_PARETO))
    u = rng.random((spec.num_clients, spec.num_classes))
    draws = spec.x_m * (1.0 - u) ** (-1.0 / spec.beta)
    counts = np.empty_like(draws, dtype=np.int64)
    for j, total in enumerate(spec.class_totals):
        counts[:, j] = _largest_remainder(draws[:, j], total)
    return counts


def partition(spec: PartitionSpec) -> np.ndarray:
    if spec.scheme is Scheme.DIRICHLET:
        return partition_dirichlet(spec)
    return partition_pareto(spec)


def write_partition_csv(path, counts: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["client_id", "class_id", "count"])
        for i, row in enumerate(counts):
            for j, c in enumerate(row):
                out.writerow([i, j, int(c)])


def read_partition_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [(int(r["client_id"]), int(r["class_id"]), int(r["count"])) for r in csv.DictReader(fh)]
    if not rows:
        raise ValidationError(f"{path}: empty partition file")
    counts = np.zeros((max(r[0] for r in rows) + 1, max(r[1] for r in rows) + 1), dtype=np.int64)
    for i, j, c in rows:
        counts[i, j] = c
    return counts


def ground_truth_curve(oracle: OracleModel, dist: LabelDistribution) -> CertifiedCurve:
    """Exact expected certified curve ``sum_j p_j L_j(r)`` of a label distribution."""
    if dist.num_classes != oracle.num_classes:
        raise DimensionError(f"oracle has {oracle.num_classes} classes, distribution {dist.num_classes}")
    values = dist.probs @ oracle.matrix()
    return CertifiedCurve(oracle.grid, np.minimum.accumulate(values))


def client_seed(seed: int, client_index: int) -> np.random.SeedSequence:
    return seed_sequence(seed, STREAM_CLIENT, client_index)


def draw_samples(oracle: OracleModel, class_counts, seed) -> SampleSet:
    """Draw robust radii by inverse transform so that ``P(radius >= r_k) = L_j(r_k)``.

    A uniform ``u`` is robust at every grid radius where ``u < L_j(r)``; since
    ``L_j`` is non-increasing those radii form a prefix of the grid, and the
    sample's radius is the last one (or -1 when the prefix is empty).
    """
    counts = np.asarray(class_counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size != oracle.num_classes:
        raise DimensionError(f"expected {oracle.num_classes} class counts, got shape {counts.shape}")
    if np.any(counts < 0) or counts.sum() == 0:
        raise ValidationError("class counts must be non-negative with at least one sample")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(counts.size), counts)
    u = rng.random(labels.size)
    table = oracle.matrix()
    reach = (u[:, None] < table[labels]).sum(axis=1)
    radii_ext = np.concatenate([[-1.0], oracle.grid.radii])
    return SampleSet(labels, radii_ext[reach])


def realize_client(oracle: OracleModel, class_counts, seed, client_id: Hashable = 0) -> tuple[SampleSet, ClientRecord]:
    """Materialize one client's local test set and the record it would report."""
    samples = draw_samples(oracle, class_counts, seed)
    counts = np.asarray(class_counts)
    record = ClientRecord(
        id=client_id,
        n=int(counts.sum()),
        dist=LabelDistribution.from_counts(counts),
        curve=empirical_curve(samples.radii, oracle.grid),
    )
    return samples, record


def realize_population(oracle: OracleModel, counts: np.ndarray, seed: int) -> tuple[list[SampleSet], list[ClientRecord]]:
    """Realize every non-empty client; client ``i`` keeps id ``i`` and its own sub-seed."""
    samples, records = [], []
    for i, row in enumerate(counts):
        if row.sum() == 0:
            continue
        s, rec = realize_client(oracle, row, client_seed(seed, i), client_id=i)
        samples.append(s)
        records.append(rec)
    return samples, records


def gini(values) -> float:
    """Gini coefficient of non-negative values (0 = perfectly even)."""
    x = np.sort(np.asarray(values, dtype=float))
    n = x.size
    if n == 0 or x.sum() == 0:
        return 0.0
    ranks = np.arange(1, n + 1)
    return float((2 * ranks - n - 1) @ x / (n * x.sum()))
