from .benchmark import (
    DisagreementMatrix,
    Predictions,
    ProbeReport,
    ProbeRow,
    TaskInfo,
    aggregate_scores,
    best_layer,
    best_per_task,
    disagreement_matrix,
    probe_cell,
    run_benchmark,
)
from .linear import (
    CLASSIFIERS,
    LinearModel,
    ProbeError,
    ProbeSpec,
    Standardizer,
    fit,
    fit_lda,
    fit_logreg,
)
from .metrics import METRIC_KINDS, MetricError, accuracy, eer, metric, uar

__all__ = [
    "METRIC_KINDS",
    "MetricError",
    "accuracy",
    "eer",
    "metric",
    "uar",
    "DisagreementMatrix",
    "Predictions",
    "ProbeReport",
    "ProbeRow",
    "TaskInfo",
    "aggregate_scores",
    "best_layer",
    "best_per_task",
    "disagreement_matrix",
    "probe_cell",
    "run_benchmark",
    "CLASSIFIERS",
    "LinearModel",
    "ProbeError",
    "ProbeSpec",
    "Standardizer",
    "fit",
    "fit_lda",
    "fit_logreg",
]
