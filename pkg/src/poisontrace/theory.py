"""Empirical checks of the convex-setting guarantees behind unlearning-based
responsibility tests.

Two statements are exercised on multinomial logistic regression (convex loss,
parameters projected onto an L2 ball of radius B after every SGD step):

1. Direction: for mixtures D_alpha = alpha * benign + (1 - alpha) * poison,
   the minimizers' mean losses on the poison distribution move with alpha,
   i.e. (alpha - alpha_minus) * (L_p(F_alpha) - L_p(F_alpha_minus)) >= 0 for
   every pair in a grid.

2. Implication: with SGD excess-risk епsilon taken at its bound B^2 rho^2 / n
   (rho estimated as the max input norm over the realized sample), if the
   trained-model losses satisfy
       L_p(F) - L_p(F_minus) >= -(alpha * eps_minus + alpha_minus * eps) / (alpha - alpha_minus)
   then the forgotten-poison model's benign fraction alpha_minus must be
   below alpha.

Loss estimates carry paired-bootstrap standard errors and every check is
asserted only up to 2 standard errors, never exactly. Mixture samples use
exact component counts (round(alpha * n) benign rows) rather than per-row
Bernoulli draws: deterministic, lower variance, and the guarantees concern
empirical risk on the realized sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, TrainingDivergence

_LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class BlobDistribution:
    """Gaussian mixture components with fixed labels: component i is
    N(means[i], sigma^2 I) labeled labels[i]."""

    means: np.ndarray = field(repr=False)
    sigma: float
    labels: tuple[int, ...]

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        object.__setattr__(self, "means", means)
        if means.ndim != 2 or len(self.labels) != len(means):
            raise ContractViolation("need one label per component mean")
        if self.sigma < 0:
            raise ContractViolation("sigma must be nonnegative")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        comp = rng.integers(0, len(self.labels), size=count)
        X = self.means[comp] + self.sigma * rng.standard_normal((count, self.dim))
        y = np.asarray(self.labels, dtype=np.int64)[comp]
        return X, y


@dataclass(frozen=True)
class MixtureSpec:
    """alpha-weighted pairing of a benign and a poison distribution."""

    benign: BlobDistribution
    poison: BlobDistribution
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractViolation("alpha must lie in [0, 1]")
        if self.benign.dim != self.poison.dim:
            raise ContractViolation("benign and poison distributions must share a dimension")

    def sample(self, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        n_benign = int(round(self.alpha * count))
        xb, yb = self.benign.sample(n_benign, rng)
        xp, yp = self.poison.sample(count - n_benign, rng)
        X = np.concatenate([xb, xp])
        y = np.concatenate([yb, yp])
        perm = rng.permutation(count)
        return X[perm], y[perm]


@dataclass(frozen=True)
class ConvexTrainConfig:
    ball_radius: float
    epochs: int = 5
    batch_size: int = 256
    learning_rate: float = 0.5

    def __post_init__(self):
        if self.ball_radius < 0:
            raise ContractViolation("ball_radius must be nonnegative")
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ContractViolation("bad optimizer settings")


@dataclass
class LinearSoftmax:
    """Multinomial logistic regression; W stacked with the bias as a last row."""

    params: np.ndarray = field(repr=False)  # (dim + 1, num_classes)

    @property
    def num_classes(self) -> int:
        return self.params.shape[1]

    def logits(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X @ self.params[:-1] + self.params[-1]

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        z = self.logits(X)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def per_sample_loss(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        p = self.predict_proba(X)
        picked = p[np.arange(len(X)), np.asarray(y, dtype=np.int64)]
        return -np.log(np.maximum(picked, _LOG_FLOOR))

    def mean_loss(self, X: np.ndarray, y: np.ndarray) -> float:
        return float(self.per_sample_loss(X, y).mean())


def _project_ball(params: np.ndarray, radius: float) -> np.ndarray:
    norm = float(np.linalg.norm(params))
    if norm > radius:
        return params * (radius / norm if radius > 0 else 0.0)
    return params


def train_convex(
    X: np.ndarray, y: np.ndarray, num_classes: int, config: ConvexTrainConfig, seed: int
) -> LinearSoftmax:
    """Projected SGD from the zero point; ball_radius=0 pins the uniform predictor.

    The learning rate decays as lr / sqrt(pass_number) so later epochs polish
    rather than bounce. Deterministic per (data, config, seed).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ContractViolation("X and y sizes do not match")
    if len(X) == 0:
        raise ContractViolation("cannot train on an empty sample")
    params = np.zeros((X.shape[1] + 1, num_classes))
    if config.ball_radius == 0.0:
        return LinearSoftmax(params)
    rng = np.random.default_rng(seed)
    model = LinearSoftmax(params)
    ones = np.ones((config.batch_size, 1))
    for epoch in range(config.epochs):
        order = rng.permutation(len(X))
        lr = config.learning_rate / np.sqrt(epoch + 1.0)
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = X[idx]
            p = model.predict_proba(xb)
            p[np.arange(len(idx)), y[idx]] -= 1.0
            xb1 = np.concatenate([xb, ones[: len(idx)]], axis=1)
            grad = xb1.T @ p / len(idx)
            params = _project_ball(params - lr * grad, config.ball_radius)
            model.params = params
        if not np.isfinite(params).all():
            raise TrainingDivergence("non-finite parameters in convex training", epoch=epoch)
    return model


def _paired_bootstrap_se(diffs: np.ndarray, draws: int, rng: np.random.Generator) -> float:
    """SE of mean(diffs) by resampling the per-sample paired differences."""
    n = len(diffs)
    means = diffs[rng.integers(0, n, size=(draws, n))].mean(axis=1)
    return float(means.std(ddof=1))


@dataclass
class DirectionCell:
    alpha: float
    alpha_minus: float
    product: float
    se: float
    holds: bool


@dataclass
class DirectionReport:
    alphas: tuple[float, ...]
    poison_losses: dict
    cells: list[DirectionCell]
    holds_fraction: float

    def to_json(self) -> dict:
        return {
            "schema": "poisontrace/theory-direction/v1",
            "alphas": list(self.alphas),
            "poison_losses": {str(k): v for k, v in self.poison_losses.items()},
            "cells": [
                {
                    "alpha": c.alpha,
                    "alpha_minus": c.alpha_minus,
                    "product": c.product,
                    "se": c.se,
                    "holds": c.holds,
                }
                for c in self.cells
            ],
            "holds_fraction": self.holds_fraction,
        }


def check_direction(
    benign: BlobDistribution,
    poison: BlobDistribution,
    alphas: tuple[float, ...],
    config: ConvexTrainConfig,
    seed: int,
    train_count: int = 50_000,
    eval_count: int = 20_000,
    bootstrap_draws: int = 200,
) -> DirectionReport:
    """Check (alpha - alpha') * (L_p(F_alpha) - L_p(F_alpha')) >= 0 on a grid.

    One model per alpha, trained on a large mixture sample standing in for
    the true-distribution minimizer; per-sample losses are evaluated on one
    shared held-out poison sample so pair differences are paired. Cells on
    the diagonal are exactly zero. Each cell passes if the product clears
    -2 standard errors.
    """
    num_classes = int(max(max(benign.labels), max(poison.labels))) + 1
    rng = np.random.default_rng(seed)
    eval_X, eval_y = poison.sample(eval_count, np.random.default_rng(seed + 1))
    losses = {}
    for alpha in alphas:
        mix = MixtureSpec(benign=benign, poison=poison, alpha=alpha)
        X, y = mix.sample(train_count, np.random.default_rng(seed + int(alpha * 1e6)))
        model = train_convex(X, y, num_classes, config, seed)
        losses[alpha] = model.per_sample_loss(eval_X, eval_y)
    cells = []
    for a in alphas:
        for am in alphas:
            if a == am:
                cells.append(DirectionCell(a, am, 0.0, 0.0, True))
                continue
            diffs = losses[a] - losses[am]
            se = _paired_bootstrap_se(diffs, bootstrap_draws, rng) * abs(a - am)
            product = (a - am) * float(diffs.mean())
            cells.append(DirectionCell(a, am, product, se, product >= -2.0 * se))
    holds = sum(c.holds for c in cells) / len(cells)
    return DirectionReport(
        alphas=tuple(alphas),
        poison_losses={a: float(losses[a].mean()) for a in alphas},
        cells=cells,
        holds_fraction=float(holds),
    )


@dataclass
class ImplicationRow:
    seed: int
    loss_full: float
    loss_reduced: float
    loss_diff_se: float
    epsilon: float
    epsilon_minus: float
    threshold: float
    condition_holds: bool
    conclusion_holds: bool
    implication_holds: bool


@dataclass
class ImplicationReport:
    alpha: float
    alpha_minus: float
    rows: list[ImplicationRow]
    implication_rate: float

    def to_json(self) -> dict:
        return {
            "schema": "poisontrace/theory-implication/v1",
            "alpha": self.alpha,
            "alpha_minus": self.alpha_minus,
            "rows": [vars(r) for r in self.rows],
            "implication_rate": self.implication_rate,
        }


def check_implication(
    benign: BlobDistribution,
    poison: BlobDistribution,
    alpha: float,
    alpha_minus: float,
    config: ConvexTrainConfig,
    seeds: tuple[int, ...],
    sample_count: int = 2_000,
    eval_count: int = 5_000,
    bootstrap_draws: int = 200,
) -> ImplicationReport:
    """Per-seed check that the loss condition implies the benign-fraction drop.

    The reduced sample keeps every poison row and drops benign rows until the
    benign fraction is alpha_minus; epsilon terms use B^2 rho^2 / n with rho
    the max input norm over the full sample.
    """
    if alpha == alpha_minus:
        raise ContractViolation("alpha and alpha_minus must differ")
    if not (0.0 <= alpha_minus <= 1.0 and 0.0 <= alpha <= 1.0):
        raise ContractViolation("fractions must lie in [0, 1]")
    num_classes = int(max(max(benign.labels), max(poison.labels))) + 1
    rows = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        n_benign = int(round(alpha * sample_count))
        n_poison = sample_count - n_benign
        Xb, yb = benign.sample(n_benign, rng)
        Xp, yp = poison.sample(n_poison, rng)
        # Reduced sample: all poison, benign thinned to fraction alpha_minus.
        n_benign_reduced = int(round(alpha_minus / (1.0 - alpha_minus) * n_poison))
        if n_benign_reduced > n_benign:
            raise ContractViolation("alpha_minus too large for this alpha; cannot thin benign rows")
        keep = rng.permutation(n_benign)[:n_benign_reduced]
        X_full = np.concatenate([Xb, Xp])
        y_full = np.concatenate([yb, yp])
        X_red = np.concatenate([Xb[keep], Xp])
        y_red = np.concatenate([yb[keep], yp])

        model_full = train_convex(X_full, y_full, num_classes, config, seed)
        model_red = train_convex(X_red, y_red, num_classes, config, seed)

        eval_X, eval_y = poison.sample(eval_count, np.random.default_rng(seed + 7))
        lf = model_full.per_sample_loss(eval_X, eval_y)
        lr_ = model_red.per_sample_loss(eval_X, eval_y)
        se = _paired_bootstrap_se(lf - lr_, bootstrap_draws, rng)

        rho = float(np.linalg.norm(X_full, axis=1).max())
        b2r2 = config.ball_radius**2 * rho**2
        eps = b2r2 / len(X_full)
        eps_minus = b2r2 / len(X_red)
        threshold = -(alpha * eps_minus + alpha_minus * eps) / (alpha - alpha_minus)
        diff = float(lf.mean() - lr_.mean())
        # Condition asserted up to 2 SE of the loss-difference estimate.
        condition = diff >= threshold - 2.0 * se
        conclusion = alpha_minus < alpha
        rows.append(
            ImplicationRow(
                seed=int(seed),
                loss_full=float(lf.mean()),
                loss_reduced=float(lr_.mean()),
                loss_diff_se=se,
                epsilon=eps,
                epsilon_minus=eps_minus,
                threshold=threshold,
                condition_holds=bool(condition),
                conclusion_holds=bool(conclusion),
                implication_holds=bool((not condition) or conclusion),
            )
        )
    rate = sum(r.implication_holds for r in rows) / len(rows)
    return ImplicationReport(
        alpha=alpha, alpha_minus=alpha_minus, rows=rows, implication_rate=float(rate)
    )


def default_theory_distributions(dim: int = 4, offset: float = 2.5, sigma: float = 0.4):
    """A two-class benign pair plus a poison component aimed at class 1.

    Benign: class 0 at -mu, class 1 at +mu. Poison: inputs near class 0
    shifted along the last axis, labeled 1, so more poison pulls the decision
    region toward the shifted blob and the poison loss down.
    """
    mu = np.zeros(dim)
    mu[0] = 1.5
    shift = np.zeros(dim)
    shift[-1] = offset
    benign = BlobDistribution(means=np.stack([-mu, mu]), sigma=sigma, labels=(0, 1))
    poison = BlobDistribution(means=(-mu + shift)[None, :], sigma=sigma, labels=(1,))
    return benign, poison
