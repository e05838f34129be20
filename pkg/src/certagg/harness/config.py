"""Experiment configuration.

Configs are INI files: one ``[section]`` per component, flat ``key = value``
entries, addressed elsewhere as ``section.key``. Every key must be known;
a typo is an error, not a silently ignored setting.

    [partition]
    scheme = dirichlet
    beta = 0.1
    class_totals = 1200, 900, 680, 510, 380, 280, 210, 150, 120, 90

    [target]
    mode = gap
    gap = 0.4
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional

from ..core import LabelDistribution, RadiusGrid, ValidationError
from ..estimators import EstimatorConfig
from ..grouping import GroupingConfig
from ..smoothing import SmoothingParams
from ..synthdata import PartitionSpec

DEFAULTS: dict[str, str] = {
    "experiment.seed": "0",
    "experiment.workers": "1",
    "experiment.mode": "oracle",
    "partition.scheme": "dirichlet",
    "partition.beta": "0.1",
    "partition.x_m": "1.0",
    "partition.num_clients": "100",
    "partition.class_totals": "1200,900,680,510,380,280,210,150,120,90",
    "oracle.amplitude_min": "0.3",
    "oracle.amplitude_max": "1.0",
    "oracle.scale_min": "0.1",
    "oracle.scale_max": "1.0",
    "oracle.prevalence_ordered": "true",
    "smoothing.sigma": "0.25",
    "smoothing.n0": "100",
    "smoothing.n": "1000",
    "smoothing.alpha_conf": "0.001",
    "smoothing.dim": "2",
    "smoothing.separation": "1.0",
    "smoothing.spread": "0.35",
    "smoothing.heldout": "2000",
    "estimator.T": "1000",
    "estimator.E": "10",
    "grouping.tau": "50",
    "grouping.merge_trailing": "false",
    "grid.steps": "20",
    "grid.max_radius": "1.0",
    "target.mode": "union",
    "target.probs": "",
    "target.gap": "",
    "target.concentration": "1.0",
    "target.tolerance": "0.01",
    "target.max_attempts": "1000000",
    "output.dir": "out",
}

MODES = ("oracle", "smoothing")
TARGET_MODES = ("union", "explicit", "gap")


class ConfigError(ValidationError):
    pass


@dataclass(frozen=True)
class OracleParams:
    amplitude: tuple = (0.3, 1.0)
    scale: tuple = (0.1, 1.0)
    prevalence_ordered: bool = True


@dataclass(frozen=True)
class BlobParams:
    dim: int = 2
    separation: float = 1.0
    spread: float = 0.35
    heldout: int = 2000


@dataclass(frozen=True)
class TargetSpec:
    mode: str = "union"
    probs: Optional[LabelDistribution] = None
    gap: Optional[float] = None
    concentration: float = 1.0
    tolerance: float = 0.01
    max_attempts: int = 1_000_000

    def __post_init__(self):
        if self.mode not in TARGET_MODES:
            raise ConfigError(f"target.mode must be one of {TARGET_MODES}, got {self.mode!r}")
        if (self.mode == "explicit") != (self.probs is not None):
            raise ConfigError("target.probs must be set exactly when target.mode = explicit")
        if (self.mode == "gap") != (self.gap is not None):
            raise ConfigError("target.gap must be set exactly when target.mode = gap")
        if self.gap is not None and self.gap < 0:
            raise ConfigError("target.gap must be non-negative")
        if self.concentration <= 0 or self.tolerance <= 0 or self.max_attempts < 1:
            raise ConfigError("target.concentration, tolerance and max_attempts must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    partition: PartitionSpec
    estimator: EstimatorConfig
    grouping: GroupingConfig = GroupingConfig()
    grid: RadiusGrid = field(default_factory=RadiusGrid.uniform)
    oracle: OracleParams = OracleParams()
    smoothing: SmoothingParams = SmoothingParams()
    blobs: BlobParams = BlobParams()
    target: TargetSpec = TargetSpec()
    mode: str = "oracle"
    seed: int = 0
    workers: int = 1
    out_dir: Path = Path("out")

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"experiment.mode must be one of {MODES}, got {self.mode!r}")
        if self.workers < 1:
            raise ConfigError("experiment.workers must be at least 1")
        if self.target.probs is not None and self.target.probs.num_classes != self.partition.num_classes:
            raise ConfigError("target.probs must have one entry per class")

    @property
    def estimator_for_run(self) -> EstimatorConfig:
        """Estimator settings with the grouping, seed and worker count of this experiment."""
        return replace(self.estimator, tau=self.grouping.tau, merge_trailing=self.grouping.merge_trailing,
                       seed=self.seed, workers=self.workers)


def _bool(key: str, raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def _floats(key: str, raw: str) -> list[float]:
    try:
        return [float(x) for x in raw.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"{key}: expected a list of numbers, got {raw!r}") from None


def _convert(key: str, raw: str, kind):
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def read_ini(path) -> dict[str, str]:
    """Flatten an INI file into ``section.key`` entries, rejecting unknown keys."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    flat = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            flat[f"{section}.{key}"] = value
    return flat


def build_config(entries: Mapping[str, str]) -> ExperimentConfig:
    unknown = sorted(set(entries) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    v = {**DEFAULTS, **entries}

    def get(key, kind=str):
        return _convert(key, v[key].strip(), kind)

    seed = get("experiment.seed", int)
    totals = [int(x) for x in _floats("partition.class_totals", v["partition.class_totals"])]
    try:
        partition = PartitionSpec(
            scheme=get("partition.scheme").lower(),
            beta=get("partition.beta", float),
            x_m=get("partition.x_m", float),
            num_clients=get("partition.num_clients", int),
            class_totals=tuple(totals),
            seed=seed,
        )
        probs = v["target.probs"].strip()
        gap = v["target.gap"].strip()
        target = TargetSpec(
            mode=get("target.mode").lower(),
            probs=LabelDistribution(_floats("target.probs", probs)) if probs else None,
            gap=_convert("target.gap", gap, float) if gap else None,
            concentration=get("target.concentration", float),
            tolerance=get("target.tolerance", float),
            max_attempts=get("target.max_attempts", int),
        )
        return ExperimentConfig(
            partition=partition,
            estimator=EstimatorConfig(T=get("estimator.T", int), E=get("estimator.E", int)),
            grouping=GroupingConfig(get("grouping.tau", int), _bool("grouping.merge_trailing", v["grouping.merge_trailing"])),
            grid=RadiusGrid.uniform(get("grid.steps", int), get("grid.max_radius", float)),
            oracle=OracleParams(
                amplitude=(get("oracle.amplitude_min", float), get("oracle.amplitude_max", float)),
                scale=(get("oracle.scale_min", float), get("oracle.scale_max", float)),
                prevalence_ordered=_bool("oracle.prevalence_ordered", v["oracle.prevalence_ordered"]),
            ),
            smoothing=SmoothingParams(
                sigma=get("smoothing.sigma", float),
                n0=get("smoothing.n0", int),
                n=get("smoothing.n", int),
                alpha_conf=get("smoothing.alpha_conf", float),
            ),
            blobs=BlobParams(
                dim=get("smoothing.dim", int),
                separation=get("smoothing.separation", float),
                spread=get("smoothing.spread", float),
                heldout=get("smoothing.heldout", int),
            ),
            target=target,
            mode=get("experiment.mode").lower(),
            seed=seed,
            workers=get("experiment.workers", int),
            out_dir=Path(v["output.dir"].strip()),
        )
    except ConfigError:
        raise
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, overrides: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """Read an INI config (or start from defaults) and apply ``section.key`` overrides."""
    entries = read_ini(path) if path is not None else {}
    entries.update(overrides or {})
    return build_config(entries)
