from .config import ConfigError, ExperimentConfig, TargetSpec, load_config
from .experiment import (
    MetricsReport,
    RunResult,
    StageError,
    TargetGenerationError,
    build_target,
    run_experiment,
    target_gap,
    union_distribution,
)
from .metrics import UndefinedMetricError, metric_mape, metric_rmse
