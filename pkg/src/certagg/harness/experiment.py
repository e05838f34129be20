"""End-to-end runs: partition, certify or realize clients, estimate, score, write."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..core import (
    STREAM_BLOBS,
    STREAM_CLIENT,
    STREAM_HELDOUT,
    STREAM_ORACLE,
    STREAM_POINT,
    STREAM_TARGET,
    CertifiedCurve,
    ClientRecord,
    LabelDistribution,
    ValidationError,
    derive_seed,
    l2_distance,
    mix_distributions,
    seed_sequence,
)
from ..estimators import EstimateReport, bound_q, estimate_ap, estimate_ga, estimate_vw, volume_weights
from ..grouping import write_grouping_csv
from ..smoothing import GaussianBlobs, certify_many, curve_from_outcomes
from ..synthdata import (
    OracleModel,
    _largest_remainder,
    ground_truth_curve,
    partition,
    realize_population,
    write_partition_csv,
)
from .config import ExperimentConfig, TargetSpec
from .metrics import UndefinedMetricError, metric_mape, metric_rmse

log = logging.getLogger(__name__)

ESTIMATORS = ("vw", "ap", "ga")
CURVES_HEADER = "radius,ground_truth,vw,ap,ga"


class TargetGenerationError(RuntimeError):
    pass


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class MetricsReport:
    rmse: dict
    mape: dict
    mape_excluded: dict
    delta: dict
    chosen_iteration: dict
    q_per_radius: list
    ground_truth: str

    def to_json_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "mape": self.mape,
            "mape_excluded": self.mape_excluded,
            "delta": self.delta,
            "chosen_iteration": self.chosen_iteration,
            "q_per_radius": self.q_per_radius,
            "ground_truth": self.ground_truth,
        }


@dataclass
class RunResult:
    metrics: MetricsReport
    truth: CertifiedCurve
    curves: dict
    reports: dict
    clients: list
    target: LabelDistribution
    counts: np.ndarray
    paths: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# target


def union_distribution(clients: Sequence[ClientRecord]) -> LabelDistribution:
    """Label distribution of all client test sets pooled together."""
    return mix_distributions(volume_weights(clients), [c.dist for c in clients])


def build_target(spec: TargetSpec, clients: Sequence[ClientRecord], seed: int = 0,
                 batch: int = 10_000) -> LabelDistribution:
    """Resolve the target label distribution.

    In gap mode, Dirichlet vectors with strictly positive entries are drawn
    until one lies within ``tolerance`` of the requested l2 distance from the
    union; the first hit in draw order wins.
    """
    union = union_distribution(clients)
    if spec.mode == "union":
        return union
    if spec.mode == "explicit":
        if spec.probs.num_classes != union.num_classes:
            raise ValidationError("explicit target has the wrong number of classes")
        return spec.probs
    if spec.gap == 0:
        return union

    rng = np.random.default_rng(seed_sequence(seed, STREAM_TARGET))
    m = union.num_classes
    tried, best = 0, np.inf
    while tried < spec.max_attempts:
        size = min(batch, spec.max_attempts - tried)
        draws = rng.dirichlet(np.full(m, spec.concentration), size=size)
        tried += size
        gaps = np.linalg.norm(draws - union.probs, axis=1)
        ok = np.all(draws > 0, axis=1) & (np.abs(gaps - spec.gap) <= spec.tolerance)
        off = np.abs(gaps - spec.gap)
        best = min(best, float(off.min()))
        if ok.any():
            hit = draws[np.argmax(ok)]
            return LabelDistribution(hit / hit.sum())
    raise TargetGenerationError(
        f"no Dirichlet({spec.concentration}) draw within {spec.tolerance} of gap {spec.gap} "
        f"after {tried} attempts; closest miss was {best:.4f} away"
    )


# ---------------------------------------------------------------------------
# pipeline


def _stage(name):
    def wrap(fn):
        def run(*args, **kwargs):
            log.info("stage %s", name)
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc
        return run
    return wrap


@_stage("partition")
def _partition(config: ExperimentConfig):
    return partition(config.partition)


@_stage("clients")
def _oracle_clients(config: ExperimentConfig, counts):
    prevalence = config.partition.class_totals if config.oracle.prevalence_ordered else None
    oracle = OracleModel.exponential(
        config.grid, config.partition.num_classes, seed_sequence(config.seed, STREAM_ORACLE),
        amplitude=config.oracle.amplitude, scale=config.oracle.scale, prevalence=prevalence,
    )
    _, clients = realize_population(oracle, counts, config.seed)
    return oracle, clients


@_stage("clients")
def _smoothing_clients(config: ExperimentConfig, counts):
    b = config.blobs
    blobs = GaussianBlobs.make(config.partition.num_classes, b.dim, b.separation, b.spread,
                               seed_sequence(config.seed, STREAM_BLOBS))
    classifier = blobs.classifier()
    clients = []
    for i, row in enumerate(counts):
        if row.sum() == 0:
            continue
        xs, labels = blobs.sample(row, seed_sequence(config.seed, STREAM_CLIENT, i))
        outcomes = certify_many(classifier, xs, config.smoothing,
                                derive_seed(config.seed, STREAM_POINT, i), config.workers)
        clients.append(ClientRecord(i, int(row.sum()), LabelDistribution.from_counts(row),
                                    curve_from_outcomes(outcomes, labels, config.grid)))
    return blobs, clients


@_stage("target")
def _target(config: ExperimentConfig, clients):
    return build_target(config.target, clients, config.seed)


@_stage("ground_truth")
def _heldout_truth(config: ExperimentConfig, blobs: GaussianBlobs, target: LabelDistribution):
    counts = _largest_remainder(target.probs, config.blobs.heldout)
    xs, labels = blobs.sample(counts, seed_sequence(config.seed, STREAM_HELDOUT))
    outcomes = certify_many(blobs.classifier(), xs, config.smoothing,
                            derive_seed(config.seed, STREAM_HELDOUT), config.workers)
    truth = curve_from_outcomes(outcomes, labels, config.grid)
    per_class = []
    for j in range(config.partition.num_classes):
        idx = np.nonzero(labels == j)[0]
        if idx.size:
            per_class.append(curve_from_outcomes([outcomes[i] for i in idx], labels[idx], config.grid).values)
    return truth, np.array(per_class)


@_stage("estimate")
def _estimate(config: ExperimentConfig, clients, target):
    est = config.estimator_for_run
    ap = estimate_ap(clients, target, est)
    ga = estimate_ga(clients, target, est)
    return {"vw": estimate_vw(clients), "ap": ap.curve, "ga": ga.curve}, {"ap": ap, "ga": ga}


@_stage("metrics")
def _metrics(truth, curves, reports, per_class, provenance) -> MetricsReport:
    rmse, mape, excluded = {}, {}, {}
    for name in ESTIMATORS:
        rmse[name] = metric_rmse(curves[name], truth)
        try:
            mape[name], excluded[name] = metric_mape(curves[name], truth)
        except UndefinedMetricError:
            mape[name], excluded[name] = None, len(truth.grid)
    return MetricsReport(
        rmse=rmse,
        mape=mape,
        mape_excluded=excluded,
        delta={k: r.delta for k, r in reports.items()},
        chosen_iteration={k: r.chosen_iteration for k, r in reports.items()},
        q_per_radius=[bound_q(per_class[:, k]) for k in range(per_class.shape[1])],
        ground_truth=provenance,
    )


def curves_csv(truth: CertifiedCurve, curves: dict) -> str:
    lines = [CURVES_HEADER]
    for k, r in enumerate(truth.grid.radii):
        row = [r, truth.values[k]] + [curves[name].values[k] for name in ESTIMATORS]
        lines.append(",".join(f"{x:.6f}" for x in row))
    return "\n".join(lines) + "\n"


def metrics_json(metrics: MetricsReport, reports: Optional[dict] = None, target=None) -> str:
    doc = metrics.to_json_dict()
    if reports:
        doc["estimates"] = {k: r.to_json_dict() for k, r in reports.items()}
    if target is not None:
        doc["target"] = [float(p) for p in target.probs]
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


@_stage("write")
def _write(out_dir: Path, result: RunResult):
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "curves": out_dir / "curves.csv",
        "metrics": out_dir / "metrics.json",
        "partition": out_dir / "partition.csv",
        "grouping": out_dir / "grouping.csv",
    }
    paths["curves"].write_text(curves_csv(result.truth, result.curves))
    paths["metrics"].write_text(metrics_json(result.metrics, result.reports, result.target))
    write_partition_csv(paths["partition"], result.counts)
    write_grouping_csv(paths["grouping"], result.reports["ga"].groups)
    return paths


def run_experiment(config: ExperimentConfig, write: bool = True) -> RunResult:
    """Run every stage; outputs depend only on the config (worker count included or not)."""
    counts = _partition(config)
    if config.mode == "oracle":
        oracle, clients = _oracle_clients(config, counts)
    else:
        blobs, clients = _smoothing_clients(config, counts)
    target = _target(config, clients)
    if config.mode == "oracle":
        truth = ground_truth_curve(oracle, target)
        per_class, provenance = oracle.matrix(), "oracle-exact"
    else:
        truth, per_class = _heldout_truth(config, blobs, target)
        provenance = "held-out-empirical"
    curves, reports = _estimate(config, clients, target)
    metrics = _metrics(truth, curves, reports, per_class, provenance)
    result = RunResult(metrics, truth, curves, reports, clients, target, counts)
    if write:
        result.paths = _write(config.out_dir, result)
    return result


def target_gap(target: LabelDistribution, clients: Sequence[ClientRecord]) -> float:
    return l2_distance(target, union_distribution(clients))
