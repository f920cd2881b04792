"""Reference implementations the tests treat as ground truth.

Everything here is written from scratch against the documented math rather
than by calling into the package, so agreement counts as evidence instead of
tautology. These run on small instances only; nothing is optimized.
"""

from __future__ import annotations

import mpmath
import numpy as np


# ---------------------------------------------------------------------------
# forward pass / cross-entropy


def ref_forward(weights, biases, x):
    """Plain float64 forward pass: relu hidden stack, softmax head.

    Returns (probs, penultimate) for a single vector or a batch.
    """
    a = np.atleast_2d(np.asarray(x, dtype=np.float64))
    for W, b in zip(weights[:-1], biases[:-1]):
        a = a @ np.asarray(W, dtype=np.float64) + np.asarray(b, dtype=np.float64)
        a = np.where(a > 0.0, a, 0.0)
    z = a @ np.asarray(weights[-1], dtype=np.float64) + np.asarray(
        biases[-1], dtype=np.float64
    )
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True), a


def ref_loss(weights, biases, x, target_dist):
    """Cross-entropy of the softmax head against a target distribution.

    Computed through log-sum-exp, never through an explicit probability
    vector, so it shares no code path with the implementation under test.
    """
    a = np.asarray(x, dtype=np.float64)[None, :]
    for W, b in zip(weights[:-1], biases[:-1]):
        a = np.maximum(
            a @ np.asarray(W, dtype=np.float64) + np.asarray(b, dtype=np.float64), 0.0
        )
    z = (
        a @ np.asarray(weights[-1], dtype=np.float64)
        + np.asarray(biases[-1], dtype=np.float64)
    )[0]
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    t = np.asarray(target_dist, dtype=np.float64)
    return float((t * (lse - z)).sum())


def ce_mpmath(probs, target_dist, dps=50):
    """-sum(t * log p) at 50 decimal digits. Assumes strictly positive probs."""
    with mpmath.workdps(dps):
        acc = mpmath.mpf(0)
        for p, t in zip(probs, target_dist):
            if t:
                acc -= mpmath.mpf(float(t)) * mpmath.log(mpmath.mpf(float(p)))
        return float(acc)


# ---------------------------------------------------------------------------
# finite differences

FD_STEP = 1e-4


def _params64(model):
    ws = [np.asarray(W, dtype=np.float64) for W in model.weights]
    bs = [np.asarray(b, dtype=np.float64) for b in model.biases]
    return ws, bs


def fd_weight_directional(model, x, target_dist, dirs_w, dirs_b, h=FD_STEP):
    """Central difference of the loss along a parameter-space direction."""
    ws, bs = _params64(model)

    def at(t):
        return ref_loss(
            [W + t * d for W, d in zip(ws, dirs_w)],
            [b + t * d for b, d in zip(bs, dirs_b)],
            x,
            target_dist,
        )

    return (at(h) - at(-h)) / (2.0 * h)


def fd_input_directional(model, x, target_dist, direction, h=FD_STEP):
    """Central difference of the loss along an input-space direction."""
    ws, bs = _params64(model)
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    return (ref_loss(ws, bs, x + h * d, target_dist)
            - ref_loss(ws, bs, x - h * d, target_dist)) / (2.0 * h)


def random_param_direction(model, rng):
    """Unit-norm random direction in parameter space: ([dW...], [db...])."""
    dirs_w = [rng.standard_normal(W.shape) for W in model.weights]
    dirs_b = [rng.standard_normal(b.shape) for b in model.biases]
    scale = np.sqrt(
        sum(float((d * d).sum()) for d in dirs_w)
        + sum(float((d * d).sum()) for d in dirs_b)
    )
    return [d / scale for d in dirs_w], [d / scale for d in dirs_b]


# ---------------------------------------------------------------------------
# full-batch Lloyd k-means (multi-restart) as a clustering quality oracle


def _kmeanspp(rows, k, rng):
    centers = [rows[rng.integers(len(rows))]]
    for _ in range(k - 1):
        d2 = np.min(
            ((rows[:, None, :] - np.asarray(centers)[None, :, :]) ** 2).sum(axis=2),
            axis=1,
        )
        total = d2.sum()
        if total <= 0.0:
            centers.append(rows[rng.integers(len(rows))])
        else:
            centers.append(rows[rng.choice(len(rows), p=d2 / total)])
    return np.asarray(centers, dtype=np.float64)


def lloyd_inertia(rows, k=2, restarts=100, seed=0, max_iter=300):
    """Best inertia over `restarts` full-batch Lloyd runs with k-means++ init."""
    rows = np.asarray(rows, dtype=np.float64)
    rng = np.random.default_rng(seed)
    best = np.inf
    for _ in range(restarts):
        centers = _kmeanspp(rows, k, rng)
        for _ in range(max_iter):
            d2 = ((rows[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            labels = d2.argmin(axis=1)
            new = centers.copy()
            for c in range(k):
                mask = labels == c
                if mask.any():
                    new[c] = rows[mask].mean(axis=0)
                else:
                    new[c] = rows[d2.min(axis=1).argmax()]
            if np.allclose(new, centers, rtol=0.0, atol=1e-12):
                centers = new
                break
            centers = new
        d2 = ((rows[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        best = min(best, float(d2.min(axis=1).sum()))
    return best
