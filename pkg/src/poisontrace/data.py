"""Labeled datasets: synthesis, stratified splitting, and binary persistence.

Datasets are immutable by convention after construction: every operation that
"modifies" one returns a new instance. Inputs are float32 row vectors, labels
are integer class ids in [0, K), the poison mask marks rows injected by an
attack, and provenance ids record where each row came from.

On-disk format (little-endian throughout):

    magic   b"PFDS"
    u32     format version (currently 1)
    u64     N (row count)
    u64     d (feature count)
    u32     K (class count)
    f32[N*d]    inputs, row-major
    u32[N]      labels
    u8[N]       poison mask
    N x (u32 length + UTF-8 bytes)   provenance ids
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, FormatError

MAGIC = b"PFDS"
FORMAT_VERSION = 1


@dataclass
class LabeledDataset:
    """A labeled sample with per-row poison bookkeeping."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    poison_mask: np.ndarray
    provenance_ids: tuple[str, ...]

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.poison_mask = np.ascontiguousarray(self.poison_mask, dtype=bool)
        if self.inputs.ndim != 2:
            raise ContractViolation("inputs must be a 2-d array")
        n = self.inputs.shape[0]
        if self.labels.shape != (n,) or self.poison_mask.shape != (n,):
            raise ContractViolation("labels and poison_mask must have one entry per row")
        if len(self.provenance_ids) != n:
            raise ContractViolation("provenance_ids must have one entry per row")
        if self.num_classes < 1:
            raise ContractViolation("num_classes must be positive")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractViolation("labels must lie in [0, num_classes)")
        if not np.isfinite(self.inputs).all():
            raise ContractViolation("inputs must be finite")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def digest(self) -> str:
        """SHA-256 of the canonical serialization; stable across processes."""
        return hashlib.sha256(serialize_dataset(self)).hexdigest()

    def take(self, indices: np.ndarray, keep_provenance: bool = True) -> "LabeledDataset":
        """New dataset restricted to `indices` (rows copied)."""
        idx = np.asarray(indices, dtype=np.int64)
        prov = tuple(self.provenance_ids[i] for i in idx) if keep_provenance else tuple(
            f"sub-{i}" for i in range(len(idx))
        )
        return LabeledDataset(
            inputs=self.inputs[idx].copy(),
            labels=self.labels[idx].copy(),
            num_classes=self.num_classes,
            poison_mask=self.poison_mask[idx].copy(),
            provenance_ids=prov,
        )

    def manifest(self) -> dict:
        counts = np.bincount(self.labels, minlength=self.num_classes)
        return {
            "digest": self.digest(),
            "rows": int(len(self)),
            "dim": int(self.dim),
            "num_classes": int(self.num_classes),
            "class_counts": [int(c) for c in counts],
            "poison_rows": int(self.poison_mask.sum()),
            "format_version": FORMAT_VERSION,
        }


@dataclass(frozen=True)
class DatasetSlice:
    """Sorted unique row indices into a parent dataset, tagged by its digest."""

    parent_digest: str
    indices: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.indices)


def make_slice(dataset: LabeledDataset, indices) -> DatasetSlice:
    idx = np.unique(np.asarray(indices, dtype=np.int64))
    if len(idx) and (idx[0] < 0 or idx[-1] >= len(dataset)):
        raise ContractViolation(
            f"slice indices must lie in [0, {len(dataset)}); got range [{idx[0]}, {idx[-1]}]"
        )
    return DatasetSlice(parent_digest=dataset.digest(), indices=idx)


def forge_blobs(
    num_classes: int,
    per_class: int,
    dim: int,
    class_separation: float = 1.0,
    noise_sigma: float = 0.08,
    seed: int = 0,
    mean_box: float = 0.8,
) -> LabeledDataset:
    """Gaussian blob classes with a pairwise mean-distance floor.

    Means are drawn in the centered box [-mean_box, mean_box]^dim and rescaled
    outward around the origin only if needed to honor `class_separation`.
    Centered means keep cross-class inner products near zero, which matters
    downstream: gradient-based projections of different classes stay close to
    orthogonal instead of sharing a large all-positive component. `mean_box`
    sets the overall data scale, which is what gives absolute L-infinity
    budgets (perturbation epsilons, collision budgets) their meaning relative
    to the class geometry. Rows are ordered class-major; deterministic per
    seed.
    """
    if num_classes < 1 or per_class < 1 or dim < 1:
        raise ContractViolation("num_classes, per_class, dim must all be positive")
    if class_separation < 0 or noise_sigma < 0:
        raise ContractViolation("class_separation and noise_sigma must be nonnegative")
    if mean_box <= 0:
        raise ContractViolation("mean_box must be positive")
    rng = np.random.default_rng(seed)
    means = rng.uniform(-mean_box, mean_box, size=(num_classes, dim))
    if num_classes > 1 and class_separation > 0:
        diffs = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diffs**2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        dmin = dist.min()
        if dmin == 0.0:
            raise ContractViolation("degenerate mean draw; change the seed")
        if dmin < class_separation:
            means = means * (class_separation / dmin)

    inputs = np.empty((num_classes * per_class, dim), dtype=np.float32)
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    prov = []
    for c in range(num_classes):
        lo = c * per_class
        block = means[c] + noise_sigma * rng.standard_normal((per_class, dim))
        inputs[lo : lo + per_class] = block.astype(np.float32)
        labels[lo : lo + per_class] = c
        prov.extend(f"src-{c}-{i}" for i in range(per_class))
    return LabeledDataset(
        inputs=inputs,
        labels=labels,
        num_classes=num_classes,
        poison_mask=np.zeros(len(labels), dtype=bool),
        provenance_ids=tuple(prov),
    )


def split(
    dataset: LabeledDataset, train_fraction: float, seed: int = 0
) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified train/test split; class proportions preserved within one row."""
    if not 0.0 < train_fraction < 1.0:
        raise ContractViolation("train_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(dataset.num_classes):
        rows = np.flatnonzero(dataset.labels == c)
        if len(rows) < 2:
            raise ContractViolation(f"class {c} has {len(rows)} samples; need at least 2 to split")
        rows = rng.permutation(rows)
        n_train = int(round(train_fraction * len(rows)))
        n_train = min(max(n_train, 1), len(rows) - 1)
        train_idx.append(rows[:n_train])
        test_idx.append(rows[n_train:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return dataset.take(train_idx), dataset.take(test_idx)


def serialize_dataset(dataset: LabeledDataset) -> bytes:
    n, d = dataset.inputs.shape
    parts = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<QQI", n, d, dataset.num_classes),
        dataset.inputs.astype("<f4").tobytes(order="C"),
        dataset.labels.astype("<u4").tobytes(),
        dataset.poison_mask.astype("u1").tobytes(),
    ]
    for pid in dataset.provenance_ids:
        raw = pid.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    return b"".join(parts)


def save_dataset(dataset: LabeledDataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_dataset(dataset))


class _Reader:
    """Bounds-checked cursor over a byte buffer; raises FormatError on truncation."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def read(self, count: int, what: str) -> bytes:
        end = self.pos + count
        if end > len(self.buf):
            raise FormatError(f"truncated file: expected {count} more bytes for {what}")
        out = self.buf[self.pos : end]
        self.pos = end
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt), what))


def deserialize_dataset(buf: bytes) -> LabeledDataset:
    r = _Reader(buf)
    magic = r.read(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}; expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset format version {version}")
    n, d, k = r.unpack("<QQI", "header")
    inputs = np.frombuffer(r.read(4 * n * d, "inputs"), dtype="<f4").reshape(n, d)
    labels = np.frombuffer(r.read(4 * n, "labels"), dtype="<u4").astype(np.int64)
    mask = np.frombuffer(r.read(n, "poison mask"), dtype="u1").astype(bool)
    prov = []
    for i in range(n):
        (length,) = r.unpack("<I", f"provenance length {i}")
        prov.append(r.read(length, f"provenance id {i}").decode("utf-8"))
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after dataset payload")
    return LabeledDataset(
        inputs=inputs.copy(),
        labels=labels,
        num_classes=int(k),
        poison_mask=mask,
        provenance_ids=tuple(prov),
    )


def load_dataset(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        return deserialize_dataset(fh.read())
