"""Estimators of a global model's certified accuracy on a target distribution.

* VW weights every client curve by its sample count.
* AP repeatedly samples ``E`` clients, finds the simplex mixture of their label
  distributions closest to the target, and keeps the best of ``T`` draws.
* GA does the same after packing the sampled small clients into virtual clients.

The error of a mixture estimate is bounded by ``delta * Q(r)``, where
``delta`` is the distribution mismatch and ``Q`` the spread of the per-class
expected curves; :func:`check_theorem1` verifies this against an oracle.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import (
    CertifiedCurve,
    ClientRecord,
    DimensionError,
    LabelDistribution,
    SimplexWeights,
    ValidationError,
    combine_curves,
    STREAM_ITERATION,
    residual,
    seed_sequence,
)
from .grouping import ClientGroup, GroupingConfig, group_clients
from .simplexopt import DEFAULT_MAX_ITER, DEFAULT_TOL, solve_simplex_ls
from .synthdata import OracleModel, ground_truth_curve


@dataclass(frozen=True)
class EstimatorConfig:
    T: int = 1000
    E: int = 10
    tau: int = 50
    seed: int = 0
    merge_trailing: bool = False
    workers: int = 1
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self):
        if self.T < 1 or self.E < 1:
            raise ValidationError("T and E must be at least 1")
        if self.tau < 1:
            raise ValidationError("tau must be at least 1")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be an unsigned 64-bit integer")

    @property
    def grouping(self) -> GroupingConfig:
        return GroupingConfig(self.tau, self.merge_trailing)


@dataclass(frozen=True)
class EstimateReport:
    curve: CertifiedCurve
    weights: SimplexWeights
    delta: float
    chosen_iteration: int
    selected_ids: tuple
    records: tuple
    residuals: np.ndarray
    groups: Optional[tuple] = None

    def to_json_dict(self) -> dict:
        return {
            "weights": [float(a) for a in self.weights.alphas],
            "delta": float(self.delta),
            "chosen_iteration": int(self.chosen_iteration),
            "selected_ids": [_jsonable_id(i) for i in self.selected_ids],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"


def _jsonable_id(cid):
    if isinstance(cid, tuple):
        return [_jsonable_id(c) for c in cid]
    if isinstance(cid, (np.integer,)):
        return int(cid)
    return cid


def estimate_vw(clients: Sequence[ClientRecord]) -> CertifiedCurve:
    """Volume-weighted sum of all client curves."""
    clients = list(clients)
    if not clients:
        raise ValidationError("need at least one client")
    weights = SimplexWeights.from_volumes([c.n for c in clients])
    return combine_curves(weights, [c.curve for c in clients])


def volume_weights(clients: Sequence[ClientRecord]) -> SimplexWeights:
    return SimplexWeights.from_volumes([c.n for c in clients])


def iteration_seed(seed: int, t: int) -> np.random.SeedSequence:
    return seed_sequence(seed, STREAM_ITERATION, t)


def _candidates(clients, idx, grouped: bool, grouping: GroupingConfig):
    picked = [clients[i] for i in idx]
    if not grouped:
        return picked, None
    groups = group_clients(picked, grouping)
    return [g.virtual_record for g in groups], groups


def _run_iterations(args):
    clients, target, config, grouped, ts = args
    n = len(clients)
    out = []
    for t in ts:
        rng = np.random.default_rng(iteration_seed(config.seed, t))
        idx = rng.choice(n, size=config.E, replace=False)
        records, _ = _candidates(clients, idx, grouped, config.grouping)
        sol = solve_simplex_ls(target, [r.dist for r in records], config.tol, config.max_iter)
        out.append((t, sol.residual, idx))
    return out


def _approximate(clients, target, config: EstimatorConfig, grouped: bool) -> EstimateReport:
    clients = list(clients)
    if not clients:
        raise ValidationError("need at least one client")
    if config.E > len(clients):
        raise ValidationError(f"E = {config.E} exceeds the {len(clients)} available clients")
    m = clients[0].dist.num_classes
    if target.num_classes != m or any(c.dist.num_classes != m for c in clients):
        raise DimensionError("target and client distributions disagree on the class count")

    ts = list(range(1, config.T + 1))
    if config.workers <= 1 or config.T < 2:
        results = _run_iterations((clients, target, config, grouped, ts))
    else:
        chunks = [c for c in np.array_split(np.array(ts), config.workers) if c.size]
        jobs = [(clients, target, config, grouped, [int(t) for t in c]) for c in chunks]
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = [r for part in pool.map(_run_iterations, jobs) for r in part]

    results.sort(key=lambda r: r[0])
    residuals = np.array([r[1] for r in results])
    best_t, _, best_idx = min(results, key=lambda r: (r[1], r[0]))

    # replay the winning iteration to recover its records and weights
    records, groups = _candidates(clients, best_idx, grouped, config.grouping)
    sol = solve_simplex_ls(target, [r.dist for r in records], config.tol, config.max_iter)
    residuals.setflags(write=False)
    return EstimateReport(
        curve=combine_curves(sol.weights, [r.curve for r in records]),
        weights=sol.weights,
        delta=sol.residual,
        chosen_iteration=best_t,
        selected_ids=tuple(r.id for r in records),
        records=tuple(records),
        residuals=residuals,
        groups=tuple(groups) if groups is not None else None,
    )


def estimate_ap(clients: Sequence[ClientRecord], target: LabelDistribution, config: EstimatorConfig) -> EstimateReport:
    """Best-of-``T`` simplex matching over random ``E``-client subsets."""
    return _approximate(clients, target, config, grouped=False)


def estimate_ga(clients: Sequence[ClientRecord], target: LabelDistribution, config: EstimatorConfig) -> EstimateReport:
    """Like :func:`estimate_ap`, but each subset is grouped by volume before matching."""
    return _approximate(clients, target, config, grouped=True)


# ---------------------------------------------------------------------------
# error bound


def bound_q(per_class_values) -> float:
    """Root of the centered sum of squares of the per-class accuracies at one radius."""
    v = np.asarray(per_class_values, dtype=float)
    if v.ndim != 1 or v.size < 1:
        raise ValidationError("need at least one per-class value")
    return float(np.sqrt(np.sum((v - v.mean()) ** 2)))


@dataclass(frozen=True)
class BoundRow:
    radius: float
    gap: float
    delta: float
    q: float

    @property
    def bound(self) -> float:
        return self.delta * self.q

    @property
    def holds(self) -> bool:
        return self.gap <= self.bound + 1e-9


def check_theorem1(oracle: OracleModel, target: LabelDistribution,
                   dists: Sequence[LabelDistribution], weights) -> list[BoundRow]:
    """Compare the exact estimation gap with ``delta * Q`` at every grid radius."""
    if target.num_classes != oracle.num_classes:
        raise DimensionError("target and oracle disagree on the class count")
    truth = ground_truth_curve(oracle, target)
    estimate = combine_curves(weights, [ground_truth_curve(oracle, d) for d in dists])
    delta = residual(target, weights, dists)
    L = oracle.matrix()
    return [
        BoundRow(float(r), float(abs(truth.values[k] - estimate.values[k])), delta, bound_q(L[:, k]))
        for k, r in enumerate(oracle.grid.radii)
    ]


def extremal_distribution(per_class_values, target: LabelDistribution, delta: float) -> LabelDistribution:
    """The distribution at distance ``delta`` from ``target`` that attains ``H = delta * Q``.

    It moves the target along the centered per-class accuracies; the move
    keeps the total mass, and ``delta`` must be small enough to stay non-negative.
    """
    v = np.asarray(per_class_values, dtype=float)
    if v.size != target.num_classes:
        raise DimensionError("need one value per class")
    centered = v - v.mean()
    norm = np.linalg.norm(centered)
    if norm == 0.0:
        raise ValidationError("all classes are equally robust; every direction is extremal")
    moved = target.probs + delta * centered / norm
    if np.any(moved < 0):
        raise ValidationError(f"delta = {delta} leaves the simplex along the extremal direction")
    return LabelDistribution(moved)


