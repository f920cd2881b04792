"""Forensics for data-poisoning attacks on small classifiers.

Given a trained model, its training set, and one observed misclassification,
the tracer isolates the training rows responsible by repeatedly clustering
the suspects in gradient-projection space and pruning whichever cluster the
model can forget without losing the misclassification.
"""

from .attacks import (
    AttackPlan,
    MisclassificationEvent,
    TriggerSpec,
    default_trigger,
    inject_clean_label_collision,
    inject_dirty_label,
    inject_overlapping,
    mint_events,
)
from .clustering import KMeansConfig, minibatch_kmeans
from .data import LabeledDataset, forge_blobs, load_dataset, save_dataset, split
from .errors import (
    ContractViolation,
    EventNotReproduced,
    FormatError,
    NoSuccessfulEvent,
    PoisonTraceError,
    TrainingDivergence,
)
from .nn import Architecture, Classifier, TrainConfig, load_model, save_model, train
from .projection import ProjectionConfig, null_target, pca_2d, project
from .seeding import derive_seed
from .tracer import (
    NON_POISON,
    POISON_IDENTIFIED,
    TracebackConfig,
    TracebackReport,
    UnlearnConfig,
    identify_event_kind,
    trace,
    unlearn,
)

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "AttackPlan",
    "Classifier",
    "ContractViolation",
    "EventNotReproduced",
    "FormatError",
    "KMeansConfig",
    "LabeledDataset",
    "MisclassificationEvent",
    "NON_POISON",
    "NoSuccessfulEvent",
    "POISON_IDENTIFIED",
    "PoisonTraceError",
    "ProjectionConfig",
    "TracebackConfig",
    "TracebackReport",
    "TrainConfig",
    "TrainingDivergence",
    "TriggerSpec",
    "UnlearnConfig",
    "default_trigger",
    "derive_seed",
    "forge_blobs",
    "identify_event_kind",
    "inject_clean_label_collision",
    "inject_dirty_label",
    "inject_overlapping",
    "load_dataset",
    "load_model",
    "minibatch_kmeans",
    "mint_events",
    "null_target",
    "pca_2d",
    "project",
    "save_dataset",
    "save_model",
    "split",
    "trace",
    "train",
    "unlearn",
]
