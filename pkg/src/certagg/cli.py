"""Command line entry point: ``certagg <command> [--config PATH] [--seed N] [--out DIR]``.

Exit status is 0 on success, 1 when the input is invalid, and 2 when a run
fails for any other reason.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .core import STREAM_BLOBS, STREAM_BOUND_CHECK, STREAM_HELDOUT, LabelDistribution, RadiusGrid, ValidationError, seed_sequence
from .estimators import check_theorem1
from .harness.config import ExperimentConfig, load_config
from .harness.experiment import (
    StageError,
    _estimate,
    _oracle_clients,
    _partition,
    _smoothing_clients,
    _target,
    build_target,
    run_experiment,
    target_gap,
)
from .smoothing import GaussianBlobs, certify_many, curve_from_outcomes
from .synthdata import OracleModel, write_partition_csv

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("certagg")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _common(suppress: bool) -> argparse.ArgumentParser:
    default = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=default, help="INI experiment config")
    p.add_argument("--seed", type=int, default=default, help="master seed (unsigned 64-bit)")
    p.add_argument("--out", type=Path, default=default, help="output directory")
    p.add_argument("--workers", type=int, default=default, help="worker processes")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="certagg", description=__doc__.splitlines()[0], parents=[_common(False)])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = [_common(True)]

    sub.add_parser("partition", parents=common, help="partition class totals across clients")
    p = sub.add_parser("certify", parents=common, help="certify a toy Gaussian-blob test set")
    p.add_argument("--points", type=int, default=200)
    sub.add_parser("estimate", parents=common, help="run the VW, AP and GA estimators")
    sub.add_parser("run", parents=common, help="full experiment with metrics")
    p = sub.add_parser("bound-check", parents=common, help="check the delta * Q error bound")
    p.add_argument("--instances", type=int, default=1000)
    p = sub.add_parser("gap-target", parents=common, help="draw a target at a given gap from the union")
    p.add_argument("--gap", type=float, required=True)
    return parser


def _config(args) -> ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides["experiment.seed"] = str(args.seed)
    if args.out is not None:
        overrides["output.dir"] = str(args.out)
    if args.workers is not None:
        overrides["experiment.workers"] = str(args.workers)
    return load_config(args.config, overrides)


def _cmd_partition(config: ExperimentConfig, args) -> int:
    counts = _partition(config)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    path = config.out_dir / "partition.csv"
    write_partition_csv(path, counts)
    sizes = counts.sum(axis=1)
    print(f"{len(sizes)} clients, sizes min {sizes.min()} median {int(np.median(sizes))} max {sizes.max()} -> {path}")
    return EXIT_OK


def _cmd_certify(config: ExperimentConfig, args) -> int:
    if args.points < 1:
        raise ValidationError("--points must be positive")
    b = config.blobs
    m = config.partition.num_classes
    blobs = GaussianBlobs.make(m, b.dim, b.separation, b.spread, seed_sequence(config.seed, STREAM_BLOBS))
    counts = np.bincount(np.arange(args.points) % m, minlength=m)
    xs, labels = blobs.sample(counts, seed_sequence(config.seed, STREAM_HELDOUT))
    outcomes = certify_many(blobs.classifier(), xs, config.smoothing, config.seed, config.workers)
    curve = curve_from_outcomes(outcomes, labels, config.grid)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    with open(config.out_dir / "certify.csv", "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["point_index", "true_label", "verdict", "predicted_label", "radius"])
        for i, (o, y) in enumerate(zip(outcomes, labels)):
            out.writerow([i, int(y), o.verdict, "" if o.label is None else o.label, f"{o.radius:.6f}"])
    _write_curve(config.out_dir / "certify_curve.csv", curve.grid, {"certified_accuracy": curve.values})
    print(f"certified accuracy at r=0: {curve.values[0]:.4f} over {args.points} points")
    return EXIT_OK


def _write_curve(path: Path, grid: RadiusGrid, columns: dict):
    lines = [",".join(["radius", *columns])]
    for k, r in enumerate(grid.radii):
        lines.append(",".join(f"{x:.6f}" for x in [r, *(v[k] for v in columns.values())]))
    path.write_text("\n".join(lines) + "\n")


def _clients(config: ExperimentConfig):
    counts = _partition(config)
    if config.mode == "oracle":
        return _oracle_clients(config, counts)[1]
    return _smoothing_clients(config, counts)[1]


def _cmd_estimate(config: ExperimentConfig, args) -> int:
    clients = _clients(config)
    target = _target(config, clients)
    curves, reports = _estimate(config, clients, target)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    doc = {k: r.to_json_dict() for k, r in reports.items()}
    (config.out_dir / "estimate.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write_curve(config.out_dir / "estimate_curves.csv", config.grid, {k: c.values for k, c in curves.items()})
    for k, r in reports.items():
        print(f"{k}: delta {r.delta:.6f} at iteration {r.chosen_iteration}")
    return EXIT_OK


def _cmd_run(config: ExperimentConfig, args) -> int:
    result = run_experiment(config)
    m = result.metrics
    for name in ("vw", "ap", "ga"):
        mape = "undefined" if m.mape[name] is None else f"{m.mape[name]:.4f}"
        print(f"{name}: rmse {m.rmse[name]:.4f} mape {mape}")
    print(f"outputs in {config.out_dir}")
    return EXIT_OK


def _cmd_bound_check(config: ExperimentConfig, args) -> int:
    if args.instances < 1:
        raise ValidationError("--instances must be positive")
    rng = np.random.default_rng(seed_sequence(config.seed, STREAM_BOUND_CHECK))
    m = config.partition.num_classes
    violations = 0
    config.out_dir.mkdir(parents=True, exist_ok=True)
    with open(config.out_dir / "bound.csv", "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["instance", "radius", "H", "delta", "Q", "holds"])
        for i in range(args.instances):
            oracle = OracleModel.exponential(config.grid, m, rng.integers(2**63),
                                             config.oracle.amplitude, config.oracle.scale)
            k = int(rng.integers(1, 6))
            dists = [LabelDistribution(rng.dirichlet(np.ones(m))) for _ in range(k)]
            target = LabelDistribution(rng.dirichlet(np.ones(m)))
            weights = rng.dirichlet(np.ones(k))
            for row in check_theorem1(oracle, target, dists, weights):
                violations += not row.holds
                out.writerow([i, f"{row.radius:.6f}", f"{row.gap:.9f}", f"{row.delta:.9f}",
                              f"{row.q:.9f}", int(row.holds)])
    print(f"{args.instances} instances, {violations} violations")
    return EXIT_OK if violations == 0 else EXIT_RUNTIME


def _cmd_gap_target(config: ExperimentConfig, args) -> int:
    clients = _clients(config)
    spec = replace(config.target, mode="gap", gap=args.gap, probs=None)
    target = build_target(spec, clients, config.seed)
    doc = {"gap_requested": args.gap, "gap_achieved": target_gap(target, clients),
           "target": [float(p) for p in target.probs]}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    config.out_dir.mkdir(parents=True, exist_ok=True)
    (config.out_dir / "target.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "partition": _cmd_partition,
    "certify": _cmd_certify,
    "estimate": _cmd_estimate,
    "run": _cmd_run,
    "bound-check": _cmd_bound_check,
    "gap-target": _cmd_gap_target,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _config(args)
        return COMMANDS[args.command](config, args)
    except StageError as exc:
        print(f"certagg: {exc}", file=sys.stderr)
        return EXIT_INVALID if isinstance(exc.cause, ValidationError) else EXIT_RUNTIME
    except ValidationError as exc:
        print(f"certagg: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        print(f"certagg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
