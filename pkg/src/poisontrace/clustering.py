"""Two-way mini-batch k-means over projection rows.

The splitter follows the classic web-scale recipe: k-means++ seeding on a
random sample, then random minibatches whose members pull their nearest
centroid along a per-centroid running mean (learning rate 1/count). With
assignments fixed at the start of a batch the per-point updates collapse to
one closed-form running-mean step per centroid, which is what the inner loop
applies.

Guarantees the rest of the pipeline relies on:

- ties in nearest-centroid assignment break toward the lower centroid index;
- the final full-batch inertia never exceeds the inertia of the initial
  centroids (the better of the two centroid sets is returned);
- a cluster left empty at the final assignment is repaired by reseeding its
  centroid at the row farthest from the surviving centroid;
- identical input rows are flagged degenerate and land in cluster 0;
- everything is deterministic given (rows, config).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation

NUM_CLUSTERS = 2


@dataclass(frozen=True)
class KMeansConfig:
    k: int = NUM_CLUSTERS
    batch_size: int = 256
    max_batches: int = 1000
    convergence_tol: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.k != NUM_CLUSTERS:
            raise ContractViolation("this splitter is fixed at k=2")
        if self.batch_size < 1 or self.max_batches < 1:
            raise ContractViolation("batch_size and max_batches must be positive")
        if not self.convergence_tol > 0:
            raise ContractViolation("convergence_tol must be positive")


@dataclass
class ClusterAssignment:
    labels: np.ndarray = field(repr=False)
    centroids: np.ndarray = field(repr=False)
    inertia: float
    batches_used: int
    degenerate: bool

    def members(self, cluster_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster_id)


def _assign(rows: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin breaks ties toward the lower index.
    d2 = ((rows[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def _inertia(rows: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    diff = rows - centroids[labels]
    return float((diff * diff).sum())


def _kmeanspp_seed(rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    first = rows[rng.integers(len(rows))]
    d2 = ((rows - first) ** 2).sum(axis=1)
    total = d2.sum()
    if total <= 0.0:
        return np.stack([first, first])
    second = rows[rng.choice(len(rows), p=d2 / total)]
    return np.stack([first, second])


def minibatch_kmeans(rows: np.ndarray, config: KMeansConfig = KMeansConfig()) -> ClusterAssignment:
    """Split rows into two clusters; see module docstring for the contract."""
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    if rows.ndim != 2 or len(rows) < NUM_CLUSTERS:
        raise ContractViolation("need a 2-d matrix with at least 2 rows")
    if not np.isfinite(rows).all():
        raise ContractViolation("clustering rows must be finite")
    rng = np.random.default_rng(config.seed)

    if not np.any(rows != rows[0]):
        # All rows identical: nothing to split.
        return ClusterAssignment(
            labels=np.zeros(len(rows), dtype=np.int8),
            centroids=np.stack([rows[0], rows[0]]),
            inertia=0.0,
            batches_used=0,
            degenerate=True,
        )

    sample_size = min(len(rows), 10 * config.batch_size)
    sample = rows[rng.choice(len(rows), size=sample_size, replace=False)]
    init = _kmeanspp_seed(sample, rng)
    if np.array_equal(init[0], init[1]):
        # The sample missed every distinct row; pull one from the full set.
        distinct = np.flatnonzero(np.any(rows != init[0], axis=1))[0]
        init[1] = rows[distinct]

    centroids = init.copy()
    counts = np.zeros(NUM_CLUSTERS, dtype=np.int64)
    mean_norm = float(np.linalg.norm(rows, axis=1).mean())
    move_floor = config.convergence_tol * max(mean_norm, 1e-300)
    batches_used = 0
    for _ in range(config.max_batches):
        batch = rows[rng.integers(0, len(rows), size=config.batch_size)]
        assign = _assign(batch, centroids)
        batches_used += 1
        max_move = 0.0
        for c in range(NUM_CLUSTERS):
            members = batch[assign == c]
            if not len(members):
                continue
            new_count = counts[c] + len(members)
            updated = (counts[c] * centroids[c] + members.sum(axis=0)) / new_count
            max_move = max(max_move, float(np.linalg.norm(updated - centroids[c])))
            centroids[c] = updated
            counts[c] = new_count
        if max_move < move_floor:
            break

    labels = _assign(rows, centroids)
    final_inertia = _inertia(rows, centroids, labels)
    init_labels = _assign(rows, init)
    init_inertia = _inertia(rows, init, init_labels)
    if init_inertia < final_inertia:
        centroids, labels, final_inertia = init, init_labels, init_inertia

    for c in range(NUM_CLUSTERS):
        if not np.any(labels == c):
            survivor = centroids[1 - c]
            farthest = int(((rows - survivor) ** 2).sum(axis=1).argmax())
            centroids = centroids.copy()
            centroids[c] = rows[farthest]
            labels = _assign(rows, centroids)
            final_inertia = _inertia(rows, centroids, labels)

    return ClusterAssignment(
        labels=labels.astype(np.int8),
        centroids=centroids,
        inertia=final_inertia,
        batches_used=batches_used,
        degenerate=False,
    )


@dataclass
class CentroidDistanceReport:
    """How far poison rows sit from each group's centroid.

    `poison_to_benign_centroid` is the mean distance from poison rows to the
    centroid of the benign rows; `poison_to_poison_centroid` the mean distance
    to their own centroid (their spread); `benign_to_benign_centroid` the
    benign spread for reference. All three are normalized by the mean row norm
    over the whole matrix. Poison fields are None when the mask marks no rows,
    benign fields when it marks everything.
    """

    poison_to_benign_centroid: float | None
    poison_to_poison_centroid: float | None
    benign_to_benign_centroid: float | None
    normalizer: float


def centroid_diagnostics(rows: np.ndarray, poison_mask: np.ndarray) -> CentroidDistanceReport:
    rows = np.asarray(rows, dtype=np.float64)
    mask = np.asarray(poison_mask, dtype=bool)
    if rows.ndim != 2 or mask.shape != (len(rows),):
        raise ContractViolation("rows and poison_mask sizes do not match")
    normalizer = float(np.linalg.norm(rows, axis=1).mean())
    scale = normalizer if normalizer > 0 else 1.0
    poison, benign = rows[mask], rows[~mask]

    def mean_dist(group: np.ndarray, centroid: np.ndarray | None) -> float | None:
        if not len(group) or centroid is None:
            return None
        return float(np.linalg.norm(group - centroid, axis=1).mean()) / scale

    poison_centroid = poison.mean(axis=0) if len(poison) else None
    benign_centroid = benign.mean(axis=0) if len(benign) else None
    return CentroidDistanceReport(
        poison_to_benign_centroid=mean_dist(poison, benign_centroid),
        poison_to_poison_centroid=mean_dist(poison, poison_centroid),
        benign_to_benign_centroid=mean_dist(benign, benign_centroid),
        normalizer=normalizer,
    )
