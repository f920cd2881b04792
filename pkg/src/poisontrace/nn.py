"""Small dense ReLU classifiers with analytic gradients and deterministic SGD.

The networks here are deliberately tiny (a few dense layers, softmax output)
but the numerics are held to a verified standard: forward/backward arithmetic
runs in float64 while weights and datasets stay float32, cross-entropy clamps
probabilities at 1e-12, and training is bitwise reproducible given (dataset,
architecture, config, seed).

Layer convention: weight matrices have shape (fan_in, fan_out) and activations
are row vectors, so a layer computes `a @ W + b`. The "penultimate" vector is
the activation feeding the final linear layer; for a model with no hidden
layers that is the input itself.

Model files use magic b"PFMW", a u32 format version, then the float32 little-
endian parameters in layer order (W0, b0, W1, b1, ...), with a JSON sidecar
`<path>.json` recording architecture, train config, and seed.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .data import LabeledDataset
from .errors import ContractViolation, FormatError, TrainingDivergence

MODEL_MAGIC = b"PFMW"
MODEL_FORMAT_VERSION = 1
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class Architecture:
    """Layer widths from input to output, e.g. (64, 48, 10)."""

    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ContractViolation("architecture needs at least input and output sizes")
        if any(int(s) < 1 for s in self.layer_sizes):
            raise ContractViolation("all layer sizes must be positive")
        if self.activation != "relu":
            raise ContractViolation(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    learning_rate: float
    shuffle_seed: int = 0

    def __post_init__(self):
        # epochs == 0 is legal and means "return the seeded initialization".
        if self.epochs < 0:
            raise ContractViolation("epochs must be >= 0")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be positive")
        if not self.learning_rate > 0:
            raise ContractViolation("learning_rate must be positive")


@dataclass
class Classifier:
    arch: Architecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    train_config: TrainConfig | None
    seed: int

    def copy(self) -> "Classifier":
        return Classifier(
            arch=self.arch,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            train_config=self.train_config,
            seed=self.seed,
        )

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes


def init_params(arch: Architecture, seed: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Seeded uniform init in +-sqrt(6/(fan_in+fan_out)); zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(arch.layer_sizes[:-1], arch.layer_sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32))
        biases.append(np.zeros(fan_out, dtype=np.float32))
    return weights, biases


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward_caches(model: Classifier, X: np.ndarray):
    """All layer activations in float64.

    Returns (activations, preacts, probs): `activations[i]` feeds layer i
    (activations[0] is the input batch, activations[-1] the penultimate),
    `preacts[i]` is the pre-activation output of layer i.
    """
    A = np.asarray(X, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] != model.arch.input_dim:
        raise ContractViolation(
            f"input dim {A.shape[-1] if A.ndim else 0} does not match model input {model.arch.input_dim}"
        )
    activations = [A]
    preacts = []
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        Z = A @ W.astype(np.float64) + b.astype(np.float64)
        preacts.append(Z)
        if i < last:
            A = np.maximum(Z, 0.0)
            activations.append(A)
    return activations, preacts, _softmax(preacts[-1])


def forward_batch(model: Classifier, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(probabilities, penultimate activations) for a batch, float64."""
    activations, _, probs = forward_caches(model, X)
    return probs, activations[-1]


def forward(model: Classifier, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(probabilities, penultimate activation) for a single input vector."""
    x = np.asarray(x)
    if x.ndim != 1:
        raise ContractViolation("forward expects a single vector; use forward_batch for batches")
    probs, penult = forward_batch(model, x[None, :])
    return probs[0], penult[0]


def loss_ce(probs: np.ndarray, target: np.ndarray) -> float:
    """Cross-entropy -sum(target * log(probs)), probabilities clamped at 1e-12.

    `target` is any distribution over classes (one-hot included).
    """
    p = np.maximum(np.asarray(probs, dtype=np.float64), PROB_FLOOR)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractViolation("probs and target must have matching shapes")
    return float(-(t * np.log(p)).sum(axis=-1).mean()) if p.ndim > 1 else float(
        -(t * np.log(p)).sum()
    )


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), num_classes), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _backward(model: Classifier, X: np.ndarray, T: np.ndarray):
    """Summed-over-batch gradients of cross-entropy w.r.t. params and inputs."""
    activations, preacts, probs = forward_caches(model, X)
    dZ = probs - np.asarray(T, dtype=np.float64)
    grads_w: list[np.ndarray] = [None] * len(model.weights)
    grads_b: list[np.ndarray] = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        grads_w[i] = activations[i].T @ dZ
        grads_b[i] = dZ.sum(axis=0)
        dA = dZ @ model.weights[i].astype(np.float64).T
        if i > 0:
            dZ = dA * (preacts[i - 1] > 0.0)
    return grads_w, grads_b, dA


def grad_weights(model: Classifier, x: np.ndarray, target: np.ndarray):
    """Per-parameter gradients [(dW, db), ...] of loss_ce(F(x), target)."""
    gw, gb, _ = _backward(model, np.asarray(x)[None, :], np.asarray(target)[None, :])
    return list(zip(gw, gb))

def grad_input(model: Classifier, x: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Gradient of loss_ce(F(x), target) w.r.t. the input vector."""
    _, _, dX = _backward(model, np.asarray(x)[None, :], np.asarray(target)[None, :])
    return dX[0]


def _check_finite(model: Classifier, epoch: int, batch: int | None = None) -> None:
    for W, b in zip(model.weights, model.biases):
        if not (np.isfinite(W).all() and np.isfinite(b).all()):
            raise TrainingDivergence(
                f"non-finite weights after epoch {epoch}", epoch=epoch, batch=batch
            )


def _sgd_epoch(model: Classifier, X: np.ndarray, T: np.ndarray, order: np.ndarray,
               batch_size: int, lr: float) -> None:
    """One in-place SGD pass over `order`; mean-gradient updates, f32 storage."""
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        gw, gb, _ = _backward(model, X[idx], T[idx])
        scale = lr / len(idx)
        for i in range(len(model.weights)):
            model.weights[i] = (
                model.weights[i].astype(np.float64) - scale * gw[i]
            ).astype(np.float32)
            model.biases[i] = (
                model.biases[i].astype(np.float64) - scale * gb[i]
            ).astype(np.float32)


def train(dataset: LabeledDataset, arch: Architecture, config: TrainConfig, seed: int) -> Classifier:
    """Train from the seeded init; bitwise reproducible for fixed arguments."""
    if len(dataset) == 0:
        raise ContractViolation("cannot train on an empty dataset")
    if arch.input_dim != dataset.dim or arch.num_classes < dataset.num_classes:
        raise ContractViolation("architecture does not match dataset dims/classes")
    if config.batch_size > len(dataset):
        raise ContractViolation("batch_size exceeds dataset size")
    weights, biases = init_params(arch, seed)
    model = Classifier(arch=arch, weights=weights, biases=biases, train_config=config, seed=seed)
    T = one_hot(dataset.labels, arch.num_classes)
    rng = np.random.default_rng(config.shuffle_seed)
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        _sgd_epoch(model, dataset.inputs, T, order, config.batch_size, config.learning_rate)
        _check_finite(model, epoch)
    return model


def fine_tune(model: Classifier, batches, config: TrainConfig) -> Classifier:
    """SGD over explicit (inputs, target-distribution) batches; source model untouched.

    Runs `config.epochs` passes over the batches in the order given. Callers
    that need per-epoch reshuffling build fresh batch lists and chain calls.
    """
    tuned = model.copy()
    for epoch in range(config.epochs):
        for batch_no, (X, T) in enumerate(batches):
            gw, gb, _ = _backward(tuned, X, T)
            scale = config.learning_rate / len(X)
            for i in range(len(tuned.weights)):
                tuned.weights[i] = (
                    tuned.weights[i].astype(np.float64) - scale * gw[i]
                ).astype(np.float32)
                tuned.biases[i] = (
                    tuned.biases[i].astype(np.float64) - scale * gb[i]
                ).astype(np.float32)
        _check_finite(tuned, epoch)
    return tuned


def continue_training(model: Classifier, dataset: LabeledDataset, config: TrainConfig) -> Classifier:
    """Further hard-label SGD from the model's current weights (warm start)."""
    if config.batch_size > len(dataset):
        raise ContractViolation("batch_size exceeds dataset size")
    tuned = model.copy()
    T = one_hot(dataset.labels, model.num_classes)
    rng = np.random.default_rng(config.shuffle_seed)
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        _sgd_epoch(tuned, dataset.inputs, T, order, config.batch_size, config.learning_rate)
        _check_finite(tuned, epoch)
    return tuned


def predict(model: Classifier, X: np.ndarray) -> np.ndarray:
    probs, _ = forward_batch(model, X)
    return probs.argmax(axis=1)


def accuracy(model: Classifier, dataset: LabeledDataset) -> float:
    return float((predict(model, dataset.inputs) == dataset.labels).mean())


def mean_loss(model: Classifier, X: np.ndarray, T: np.ndarray) -> float:
    probs, _ = forward_batch(model, X)
    return loss_ce(probs, T)


def model_digest(model: Classifier) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(asdict(model.arch), sort_keys=True).encode())
    for W, b in zip(model.weights, model.biases):
        h.update(W.astype("<f4").tobytes(order="C"))
        h.update(b.astype("<f4").tobytes(order="C"))
    return h.hexdigest()


def save_model(model: Classifier, path) -> None:
    path = str(path)
    blob = [MODEL_MAGIC, struct.pack("<I", MODEL_FORMAT_VERSION)]
    for W, b in zip(model.weights, model.biases):
        blob.append(W.astype("<f4").tobytes(order="C"))
        blob.append(b.astype("<f4").tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))
    sidecar = {
        "arch": {"layer_sizes": list(model.arch.layer_sizes), "activation": model.arch.activation},
        "train_config": asdict(model.train_config) if model.train_config else None,
        "seed": int(model.seed),
        "format_version": MODEL_FORMAT_VERSION,
    }
    with open(path + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path) -> Classifier:
    path = str(path)
    try:
        with open(path + ".json") as fh:
            sidecar = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"missing model sidecar {path + '.json'}")
    except json.JSONDecodeError as exc:
        raise FormatError(f"unparseable model sidecar: {exc}")
    try:
        arch = Architecture(
            layer_sizes=tuple(sidecar["arch"]["layer_sizes"]),
            activation=sidecar["arch"]["activation"],
        )
        tc = sidecar["train_config"]
        train_config = TrainConfig(**tc) if tc else None
        seed = int(sidecar["seed"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"model sidecar missing field: {exc}")

    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MODEL_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}; expected {MODEL_MAGIC!r}")
    if len(buf) < 8:
        raise FormatError("truncated model file: missing version field")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != MODEL_FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {version}")
    pos = 8
    weights, biases = [], []
    for fan_in, fan_out in zip(arch.layer_sizes[:-1], arch.layer_sizes[1:]):
        need = 4 * (fan_in * fan_out + fan_out)
        if pos + need > len(buf):
            raise FormatError("truncated model file: fewer parameters than architecture requires")
        W = np.frombuffer(buf, dtype="<f4", count=fan_in * fan_out, offset=pos).reshape(
            fan_in, fan_out
        )
        pos += 4 * fan_in * fan_out
        b = np.frombuffer(buf, dtype="<f4", count=fan_out, offset=pos)
        pos += 4 * fan_out
        weights.append(W.copy())
        biases.append(b.copy())
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after model parameters")
    return Classifier(arch=arch, weights=weights, biases=biases, train_config=train_config, seed=seed)
