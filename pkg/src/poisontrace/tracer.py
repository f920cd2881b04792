"""Iterative traceback from one misclassification event to the training rows
that caused it.

Each iteration splits the still-suspect rows into two clusters in projection
space, then asks, for each cluster: if the model is made to forget that
cluster (trained toward uniform outputs on it while keeping its behavior on
everything else), does the event's loss stay put or drop? A cluster that
passes is innocent and is pruned; the loop repeats on the remainder until
nothing can be pruned or the suspect set is small. If not even the first
iteration can prune a cluster, the event is ruled not poison-caused.

Forgetting is approximated by fine-tuning a copy of the model for a few
epochs on the full training set with per-row targets: uniform for the cluster
under test, the original one-hot labels elsewhere. Projections are computed
once from the model under analysis and sliced per iteration.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attacks import MisclassificationEvent
from .clustering import ClusterAssignment, KMeansConfig, minibatch_kmeans
from .data import LabeledDataset
from .errors import ContractViolation, EventNotReproduced, TrainingDivergence
from .nn import Classifier, forward, loss_ce, one_hot, _sgd_epoch, _check_finite
from .projection import ProjectionConfig, ProjectionMatrix, project
from .seeding import derive_seed

POISON_IDENTIFIED = "poison_identified"
NON_POISON = "non_poison_event"
POISON_SUSPECTED = "poison_suspected"
INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True)
class UnlearnConfig:
    """Forgetting pass hyperparameters; None fields inherit the model's own."""

    epochs: int = 5
    learning_rate: float | None = None
    batch_size: int | None = None
    epsilon_margin: float = 0.0
    # Per-epoch cap on how many retained (non-forgotten) rows take part in the
    # fine-tune. Uncapped, the retention term re-teaches whatever the forget
    # set was supposed to remove whenever the two overlap in function.
    benign_sample_cap: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractViolation("unlearning needs at least one epoch")
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise ContractViolation("learning_rate must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ContractViolation("batch_size must be positive")
        if self.epsilon_margin < 0:
            raise ContractViolation("epsilon_margin must be nonnegative")
        if self.benign_sample_cap is not None and self.benign_sample_cap < 1:
            raise ContractViolation("benign_sample_cap must be positive when set")


@dataclass(frozen=True)
class TracebackConfig:
    unlearn: UnlearnConfig = UnlearnConfig()
    kmeans: KMeansConfig = KMeansConfig()
    projection: ProjectionConfig = ProjectionConfig()
    min_set_size: int = 4
    max_iterations: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.min_set_size < 2:
            raise ContractViolation("min_set_size must be at least 2")
        if self.max_iterations < 1:
            raise ContractViolation("max_iterations must be positive")


@dataclass
class PruneDecision:
    """Outcome of testing one cluster for innocence.

    `qualifies` records the loss comparison (event loss did not increase
    beyond the margin after forgetting the cluster); `pruned` records whether
    this cluster was the one actually removed. pruned implies qualifies.
    """

    cluster_id: int
    cluster_size: int
    loss_before: float
    loss_after: float
    qualifies: bool
    pruned: bool = False
    diverged: bool = False
    # Dataset indices of the tested cluster; kept on the object for audits,
    # not serialized.
    members: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "cluster_id": self.cluster_id,
            "cluster_size": self.cluster_size,
            "loss_before": self.loss_before,
            "loss_after": self.loss_after,
            "qualifies": self.qualifies,
            "pruned": self.pruned,
            "diverged": self.diverged,
        }


@dataclass
class IterationRecord:
    iteration: int
    cluster_sizes: tuple[int, int]
    decisions: tuple[PruneDecision, ...]
    pruned_cluster: int | None
    degenerate: bool
    seconds: float

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "cluster_sizes": list(self.cluster_sizes),
            "decisions": [d.to_json() for d in self.decisions],
            "pruned_cluster": self.pruned_cluster,
            "degenerate": self.degenerate,
        }


@dataclass
class PruneOutcome:
    decisions: tuple[PruneDecision, ...]
    pruned_cluster: int | None
    remaining: np.ndarray = field(repr=False)
    assignment: ClusterAssignment | None
    degenerate: bool


@dataclass
class TracebackReport:
    event: MisclassificationEvent
    verdict: str
    identified_indices: np.ndarray = field(repr=False)
    identified_provenance: tuple[str, ...]
    loss_before: float
    iterations: list[IterationRecord]
    config: dict
    total_seconds: float

    def to_json(self, include_timings: bool = True) -> dict:
        out = {
            "schema": "poisontrace/trace-report/v1",
            "event": self.event.to_json(),
            "verdict": self.verdict,
            "identified_indices": [int(i) for i in self.identified_indices],
            "identified_provenance": list(self.identified_provenance),
            "loss_before": self.loss_before,
            "iterations": [r.to_json() for r in self.iterations],
            "config": self.config,
        }
        if include_timings:
            out["timings"] = {
                "total_seconds": self.total_seconds,
                "per_iteration_seconds": [r.seconds for r in self.iterations],
            }
        return out


def event_loss(model: Classifier, event: MisclassificationEvent) -> float:
    """Cross-entropy of the model's output against the event's predicted label."""
    probs, _ = forward(model, event.input)
    return loss_ce(probs, one_hot(np.array([event.predicted_label]), model.num_classes)[0])


def unlearn(
    model: Classifier,
    dataset: LabeledDataset,
    forget_indices: np.ndarray,
    config: UnlearnConfig,
    seed: int,
) -> Classifier:
    """Fine-tune a copy of the model to forget `forget_indices`.

    Targets are uniform distributions on the forget rows and the original
    one-hot labels everywhere else; both terms are weighted equally by running
    plain SGD over the shuffled union. Learning rate and batch size default to
    the ones the model was trained with. When benign_sample_cap is set, each
    epoch keeps the full forget set but only a fresh random sample of at most
    that many retained rows.
    """
    forget = np.asarray(forget_indices, dtype=np.int64)
    if len(forget) == 0:
        raise ContractViolation("forget set must be nonempty")
    if forget.min() < 0 or forget.max() >= len(dataset):
        raise ContractViolation("forget indices out of dataset range")
    if model.train_config is None and (config.learning_rate is None or config.batch_size is None):
        raise ContractViolation(
            "model has no training config; unlearning needs explicit learning_rate and batch_size"
        )
    lr = config.learning_rate if config.learning_rate is not None else model.train_config.learning_rate
    bs = config.batch_size if config.batch_size is not None else model.train_config.batch_size
    k = model.num_classes
    T = one_hot(dataset.labels, k)
    T[forget] = 1.0 / k
    retained = np.setdiff1d(np.arange(len(dataset), dtype=np.int64), forget, assume_unique=False)
    cap = config.benign_sample_cap
    tuned = model.copy()
    rng = np.random.default_rng(seed)
    for epoch in range(config.epochs):
        if cap is not None and len(retained) > cap:
            pool = np.concatenate([forget, rng.choice(retained, size=cap, replace=False)])
            order = pool[rng.permutation(len(pool))]
        else:
            order = rng.permutation(len(dataset))
        _sgd_epoch(tuned, dataset.inputs, T, order, bs, lr)
        _check_finite(tuned, epoch)
    return tuned


def prune_step(
    model: Classifier,
    dataset: LabeledDataset,
    event: MisclassificationEvent,
    unmarked: np.ndarray,
    projections: ProjectionMatrix,
    config: TracebackConfig,
    iteration_seed: int,
    loss_before: float | None = None,
) -> PruneOutcome:
    """One cluster-test-prune round over the currently suspect rows."""
    unmarked = np.asarray(unmarked, dtype=np.int64)
    if len(unmarked) < 2:
        raise ContractViolation("need at least two suspect rows to split")
    if loss_before is None:
        loss_before = event_loss(model, event)
    rows = projections.rows_for(unmarked)
    assignment = minibatch_kmeans(
        rows, replace(config.kmeans, seed=derive_seed(iteration_seed, "kmeans"))
    )
    if assignment.degenerate:
        return PruneOutcome(
            decisions=(), pruned_cluster=None, remaining=unmarked,
            assignment=assignment, degenerate=True,
        )

    decisions = []
    for cid in range(2):
        members = unmarked[assignment.labels == cid]
        diverged = False
        try:
            shadow = unlearn(
                model, dataset, members, config.unlearn,
                derive_seed(iteration_seed, "unlearn", cid),
            )
            loss_after = event_loss(shadow, event)
        except TrainingDivergence:
            loss_after = float("nan")
            diverged = True
        qualifies = (not diverged) and loss_before >= loss_after - config.unlearn.epsilon_margin
        decisions.append(
            PruneDecision(
                cluster_id=cid,
                cluster_size=int(len(members)),
                loss_before=float(loss_before),
                loss_after=float(loss_after),
                qualifies=qualifies,
                diverged=diverged,
                members=members,
            )
        )

    qualifying = [d for d in decisions if d.qualifies]
    pruned_cluster = None
    if len(qualifying) == 1:
        pruned_cluster = qualifying[0].cluster_id
    elif len(qualifying) == 2:
        a, b = qualifying
        if a.loss_after != b.loss_after:
            pruned_cluster = a.cluster_id if a.loss_after < b.loss_after else b.cluster_id
        else:
            pruned_cluster = a.cluster_id if a.cluster_size >= b.cluster_size else b.cluster_id
    if pruned_cluster is not None:
        decisions[pruned_cluster].pruned = True
        remaining = unmarked[assignment.labels != pruned_cluster]
    else:
        remaining = unmarked
    return PruneOutcome(
        decisions=tuple(decisions),
        pruned_cluster=pruned_cluster,
        remaining=remaining,
        assignment=assignment,
        degenerate=False,
    )


def trace(
    model: Classifier,
    dataset: LabeledDataset,
    event: MisclassificationEvent,
    config: TracebackConfig = TracebackConfig(),
) -> TracebackReport:
    """Run the full prune loop; see module docstring for the procedure."""
    start = time.perf_counter()
    probs, _ = forward(model, event.input)
    if int(probs.argmax()) != event.predicted_label:
        raise EventNotReproduced(
            f"model predicts {int(probs.argmax())} on the event input, "
            f"event claims {event.predicted_label}"
        )
    loss_before = event_loss(model, event)
    projections = project(model, dataset, None, config.projection)
    unmarked = np.arange(len(dataset), dtype=np.int64)
    iterations: list[IterationRecord] = []
    verdict = INCONCLUSIVE
    for it in range(1, config.max_iterations + 1):
        if len(unmarked) < config.min_set_size:
            verdict = POISON_IDENTIFIED
            break
        t0 = time.perf_counter()
        outcome = prune_step(
            model, dataset, event, unmarked, projections, config,
            derive_seed(config.seed, "iteration", it), loss_before,
        )
        sizes = (
            (outcome.decisions[0].cluster_size, outcome.decisions[1].cluster_size)
            if outcome.decisions else (len(unmarked), 0)
        )
        iterations.append(
            IterationRecord(
                iteration=it,
                cluster_sizes=sizes,
                decisions=outcome.decisions,
                pruned_cluster=outcome.pruned_cluster,
                degenerate=outcome.degenerate,
                seconds=time.perf_counter() - t0,
            )
        )
        if outcome.pruned_cluster is None:
            verdict = NON_POISON if it == 1 else POISON_IDENTIFIED
            break
        unmarked = outcome.remaining
    else:
        verdict = INCONCLUSIVE

    identified = np.empty(0, dtype=np.int64) if verdict == NON_POISON else unmarked
    return TracebackReport(
        event=event,
        verdict=verdict,
        identified_indices=identified,
        identified_provenance=tuple(dataset.provenance_ids[i] for i in identified),
        loss_before=float(loss_before),
        iterations=iterations,
        config=asdict(config),
        total_seconds=time.perf_counter() - start,
    )


def identify_event_kind(
    model: Classifier,
    dataset: LabeledDataset,
    event: MisclassificationEvent,
    config: TracebackConfig = TracebackConfig(),
) -> str:
    """One prune round: NON_POISON if neither cluster can be ruled innocent."""
    probs, _ = forward(model, event.input)
    if int(probs.argmax()) != event.predicted_label:
        raise EventNotReproduced(
            f"model predicts {int(probs.argmax())} on the event input, "
            f"event claims {event.predicted_label}"
        )
    projections = project(model, dataset, None, config.projection)
    outcome = prune_step(
        model, dataset, event, np.arange(len(dataset), dtype=np.int64),
        projections, config, derive_seed(config.seed, "iteration", 1),
    )
    return NON_POISON if outcome.pruned_cluster is None else POISON_SUSPECTED
