"""Per-sample projections into final-layer gradient space.

Each training row is mapped to the gradient of its cross-entropy loss against
a uniform "no information" target, taken with respect to the final layer's
weight matrix only (biases excluded). In closed form that gradient is the
outer product (p - u) x h, where p is the model's output distribution, u the
uniform distribution, and h the penultimate activation; rows are its C-order
flattening, so coordinate k*h_dim + j pairs output class k with penultimate
unit j.

A rho-percent coordinate subsample (the same coordinate subset for every row)
keeps downstream clustering cheap; rows are L2-normalized by default, with
all-zero rows left untouched. Projections are computed once from the model
under analysis and reused across traceback iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .errors import ContractViolation
from .nn import Classifier, forward_batch, model_digest

_POWER_ITERS = 200
_POWER_TOL = 1e-10


@dataclass(frozen=True)
class ProjectionConfig:
    rho_percent: float = 100.0
    subsample_seed: int = 0
    normalize: bool = True

    def __post_init__(self):
        if not 0.0 < self.rho_percent <= 100.0:
            raise ContractViolation("rho_percent must be in (0, 100]")


@dataclass
class ProjectionMatrix:
    """Projection rows plus the bookkeeping needed to reuse and audit them."""

    rows: np.ndarray
    row_index_map: np.ndarray = field(repr=False)
    coord_indices: np.ndarray = field(repr=False)
    config: ProjectionConfig
    model_digest: str

    def __len__(self) -> int:
        return self.rows.shape[0]

    def rows_for(self, dataset_indices: np.ndarray) -> np.ndarray:
        """Rows for the given dataset indices (must be a subset of the map)."""
        positions = np.searchsorted(self.row_index_map, dataset_indices)
        if positions.max(initial=-1) >= len(self.row_index_map) or not np.array_equal(
            self.row_index_map[positions], dataset_indices
        ):
            raise ContractViolation("requested dataset indices were not projected")
        return self.rows[positions]


def null_target(num_classes: int) -> np.ndarray:
    """The uniform target distribution over `num_classes` outputs."""
    if num_classes < 1:
        raise ContractViolation("num_classes must be positive")
    return np.full(num_classes, 1.0 / num_classes, dtype=np.float64)


def subsampled_coords(weight_count: int, config: ProjectionConfig) -> np.ndarray:
    """Sorted coordinate subset of size max(1, round(rho% of weight_count))."""
    m = max(1, int(round(config.rho_percent / 100.0 * weight_count)))
    rng = np.random.default_rng(config.subsample_seed)
    return np.sort(rng.choice(weight_count, size=m, replace=False))


def project(
    model: Classifier,
    dataset: LabeledDataset,
    indices: np.ndarray | None = None,
    config: ProjectionConfig = ProjectionConfig(),
) -> ProjectionMatrix:
    """Project dataset rows (all, or the given indices) through the model."""
    if indices is None:
        indices = np.arange(len(dataset), dtype=np.int64)
    else:
        indices = np.asarray(indices, dtype=np.int64)
        if len(indices) and (indices.min() < 0 or indices.max() >= len(dataset)):
            raise ContractViolation("projection indices out of dataset range")
        if np.any(np.diff(indices) <= 0):
            raise ContractViolation("projection indices must be sorted and unique")
    probs, penult = forward_batch(model, dataset.inputs[indices])
    k = model.num_classes
    h_dim = penult.shape[1]
    coords = subsampled_coords(k * h_dim, config)

    centered = probs - 1.0 / k
    # Flattened outer products, restricted to the kept coordinates: coordinate
    # c corresponds to output class c // h_dim and penultimate unit c % h_dim.
    rows = centered[:, coords // h_dim] * penult[:, coords % h_dim]
    if config.normalize:
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        np.divide(rows, norms, out=rows, where=norms > 0.0)
    if not np.isfinite(rows).all():
        raise ContractViolation("projection produced non-finite rows")
    return ProjectionMatrix(
        rows=rows,
        row_index_map=indices,
        coord_indices=coords,
        config=config,
        model_digest=model_digest(model),
    )


@dataclass
class Pca2d:
    coords: np.ndarray
    explained_ratio: tuple[float, float]
    rank_deficient: bool


def _power_iteration(gram_mul, dim: int, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Leading eigenvector/value of a PSD operator given as a mat-vec closure."""
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(_POWER_ITERS):
        w = gram_mul(v)
        norm = np.linalg.norm(w)
        if norm <= _POWER_TOL:
            return v, 0.0
        w /= norm
        done = np.linalg.norm(w - v) < _POWER_TOL
        v = w
        lam = float(v @ gram_mul(v))
        if done:
            break
    # Deterministic sign: largest-magnitude coefficient made positive.
    pivot = int(np.argmax(np.abs(v)))
    if v[pivot] < 0:
        v = -v
    return v, lam


def pca_2d(matrix: ProjectionMatrix | np.ndarray, seed: int = 0) -> Pca2d:
    """Two-component PCA via power iteration with deflation.

    Rank-deficient inputs (fewer than two informative directions) get a zeroed
    second component and a raised flag. Output is reproducible under `seed`.
    """
    rows = matrix.rows if isinstance(matrix, ProjectionMatrix) else np.asarray(matrix)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ContractViolation("pca_2d needs a nonempty 2-d matrix")
    X = rows.astype(np.float64) - rows.mean(axis=0, dtype=np.float64)
    n, d = X.shape
    total_var = float((X * X).sum() / n)
    rng = np.random.default_rng(seed)
    if total_var <= 0.0:
        return Pca2d(np.zeros((n, 2)), (0.0, 0.0), True)

    def cov_mul(v):
        return X.T @ (X @ v) / n

    v1, lam1 = _power_iteration(cov_mul, d, rng)
    proj1 = X @ v1
    X2 = X - np.outer(proj1, v1)

    def cov_mul_deflated(v):
        return X2.T @ (X2 @ v) / n

    v2, lam2 = _power_iteration(cov_mul_deflated, d, rng)
    rank_deficient = lam1 <= 0.0 or lam2 <= max(1e-10 * lam1, 0.0)
    proj2 = np.zeros(n) if rank_deficient else X2 @ v2
    if rank_deficient:
        lam2 = 0.0
    coords = np.stack([proj1, proj2], axis=1)
    return Pca2d(coords, (lam1 / total_var, lam2 / total_var), bool(rank_deficient))


def projection_to_csv(matrix: ProjectionMatrix, path) -> None:
    header = "index," + ",".join(f"c{int(c)}" for c in matrix.coord_indices)
    body = np.column_stack([matrix.row_index_map.astype(np.float64), matrix.rows])
    np.savetxt(path, body, delimiter=",", header=header, comments="", fmt="%.9g")


def pca_to_csv(matrix: ProjectionMatrix, pca: Pca2d, mask: np.ndarray | None, path) -> None:
    """Write index,pc1,pc2[,poison] rows for plotting."""
    cols = [matrix.row_index_map.astype(np.float64), pca.coords[:, 0], pca.coords[:, 1]]
    header = "index,pc1,pc2"
    if mask is not None:
        cols.append(np.asarray(mask, dtype=np.float64))
        header += ",poison"
    np.savetxt(path, np.column_stack(cols), delimiter=",", header=header, comments="", fmt="%.9g")
