"""Per-pixel logistic regression.

The objective is the (optionally weighted) mean negative log-likelihood
plus ``(1/C) * sum(beta**2)``; the intercept is not penalized.  Because the
data term is a mean, ``C`` values written for a summed log loss (where the
usual form is ``0.5*|beta|^2 + C * sum(loss)``) correspond to
``summed_to_mean_c(C, n)``.  ``L2 = 1/C``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import rng

PROB_CLAMP = 1e-15


class LinearFitError(RuntimeError):
    def __init__(self, message: str, last_loss: float):
        super().__init__(f"{message} (last loss {last_loss:.10g})")
        self.last_loss = last_loss


@dataclass(frozen=True)
class LinearParams:
    intercept: float
    coefficients: np.ndarray
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        coef = np.asarray(self.coefficients, dtype=np.float64).reshape(-1)
        if not (np.isfinite(self.intercept) and np.all(np.isfinite(coef))):
            raise ValueError("parameters must be finite")
        if self.feature_names and len(self.feature_names) != coef.size:
            raise ValueError("one coefficient per feature name")
        object.__setattr__(self, "coefficients", coef)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.intercept], self.coefficients])

    @classmethod
    def from_vector(cls, theta: np.ndarray, names: Sequence[str] = ()) -> "LinearParams":
        return cls(float(theta[0]), np.array(theta[1:]), tuple(names))

    def write_csv(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["feature", "coefficient"])
            w.writerow(["(intercept)", repr(float(self.intercept))])
            names = self.feature_names or tuple(f"x{i}" for i in range(self.coefficients.size))
            for n, c in zip(names, self.coefficients):
                w.writerow([n, repr(float(c))])

    @classmethod
    def read_csv(cls, path: str | Path) -> "LinearParams":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        intercept = float(rows[0][1])
        return cls(intercept, np.array([float(r[1]) for r in rows[1:]]), tuple(r[0] for r in rows[1:]))


@dataclass(frozen=True)
class SGDConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    patience: int = 20
    max_epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


@dataclass(frozen=True)
class LinearFitConfig:
    C: float = 1.0
    max_iterations: int = 20000
    tol: float = 1e-9
    class_weight: str | None = None
    optimizer: str = "batch"
    sgd: SGDConfig = field(default_factory=SGDConfig)

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("C must be positive")
        if self.optimizer not in ("batch", "sgd_early_stop"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.class_weight not in (None, "balanced"):
            raise ValueError("class_weight must be None or 'balanced'")


def summed_to_mean_c(c_summed: float, n_samples: int) -> float:
    """Convert C of ``0.5*|beta|^2 + C*sum(loss)`` to this module's C."""
    return 2.0 * c_summed * n_samples


def _as_matrix(table) -> np.ndarray:
    rows = getattr(table, "rows", table)
    return np.asarray(rows, dtype=np.float64)


def lr_predict(params: LinearParams, table) -> np.ndarray:
    x = _as_matrix(table)
    if x.ndim != 2 or x.shape[1] != params.coefficients.size:
        raise ValueError(f"table has {x.shape[-1]} columns, params expect {params.coefficients.size}")
    return expit(params.intercept + x @ params.coefficients)


def balanced_weights(labels: np.ndarray) -> tuple[float, float]:
    """(w_pos, w_neg) with w_c = N / (2 N_c)."""
    y = np.asarray(labels)
    n = y.size
    n_pos = int(np.sum(y == 1))
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("balanced weights need both classes")
    return n / (2.0 * n_pos), n / (2.0 * n_neg)


def sample_weights(labels: np.ndarray, class_weight: str | None) -> np.ndarray | None:
    if class_weight is None:
        return None
    w_pos, w_neg = balanced_weights(labels)
    return np.where(np.asarray(labels) == 1, w_pos, w_neg)


def _loss_grad(theta: np.ndarray, x: np.ndarray, y: np.ndarray, C: float,
               w: np.ndarray | None) -> tuple[float, np.ndarray]:
    z = theta[0] + x @ theta[1:]
    p = np.clip(expit(z), PROB_CLAMP, 1.0 - PROB_CLAMP)
    nll = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    r = p - y
    if w is None:
        data = nll.mean()
        r = r / y.size
    else:
        total = w.sum()
        data = np.dot(w, nll) / total
        r = w * r / total
    beta = theta[1:]
    loss = data + np.dot(beta, beta) / C
    grad = np.empty_like(theta)
    grad[0] = r.sum()
    grad[1:] = x.T @ r + 2.0 * beta / C
    return float(loss), grad


def penalized_loss(params: LinearParams, table, labels, C: float, weights=None) -> float:
    """Mean (weighted) negative log-likelihood plus (1/C) * sum(beta^2)."""
    x = _as_matrix(table)
    y = np.asarray(labels, dtype=np.float64)
    w = None if weights is None else np.asarray(weights, dtype=np.float64)
    return _loss_grad(params.as_vector(), x, y, C, w)[0]


def penalized_loss_grad(params: LinearParams, table, labels, C: float, weights=None) -> np.ndarray:
    x = _as_matrix(table)
    y = np.asarray(labels, dtype=np.float64)
    w = None if weights is None else np.asarray(weights, dtype=np.float64)
    return _loss_grad(params.as_vector(), x, y, C, w)[1]


def _check_classes(y: np.ndarray):
    if not (np.any(y == 1) and np.any(y == 0)):
        raise ValueError("fitting needs at least one positive and one negative label")


def lr_fit_batch(table, labels, config: LinearFitConfig = LinearFitConfig()) -> LinearParams:
    """Full-gradient descent with Barzilai-Borwein steps and an Armijo
    backtracking safeguard.  Converges when the largest gradient component
    falls below ``config.tol``."""
    x = _as_matrix(table)
    y = np.asarray(labels, dtype=np.float64)
    _check_classes(y)
    w = sample_weights(y, config.class_weight)
    names = tuple(getattr(table, "column_names", ()))
    theta = np.zeros(x.shape[1] + 1)
    loss, grad = _loss_grad(theta, x, y, config.C, w)
    step = 1.0
    for _ in range(config.max_iterations):
        # decreases below the loss's rounding error cannot be detected
        slack = 8.0 * np.finfo(float).eps * abs(loss)
        if np.max(np.abs(grad)) <= config.tol:
            return LinearParams.from_vector(theta, names)
        gg = float(np.dot(grad, grad))
        while True:
            cand = theta - step * grad
            c_loss, c_grad = _loss_grad(cand, x, y, config.C, w)
            if c_loss <= loss - 1e-4 * step * gg + slack or step < 1e-20:
                break
            step *= 0.5
        s, g_diff = cand - theta, c_grad - grad
        curv = float(np.dot(s, g_diff))
        theta, loss, grad = cand, c_loss, c_grad
        step = float(np.dot(s, s)) / curv if curv > 0 else step * 2.0
    if np.max(np.abs(grad)) <= config.tol:
        return LinearParams.from_vector(theta, names)
    raise LinearFitError(f"no convergence within {config.max_iterations} iterations", loss)


def brier(p: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((np.asarray(p, dtype=np.float64) - y) ** 2))


@dataclass(frozen=True)
class SGDHistory:
    val_brier: tuple[float, ...]
    best_epoch: int  # 1-indexed


def lr_fit_sgd_earlystop(train, train_labels, validation, validation_labels,
                         config: LinearFitConfig = LinearFitConfig(optimizer="sgd_early_stop"),
                         return_history: bool = False):
    """Minibatch SGD with momentum; validation Brier after every epoch;
    stops after ``patience`` epochs without improvement and returns the
    weights of the best epoch."""
    sgd = config.sgd
    x = _as_matrix(train)
    y = np.asarray(train_labels, dtype=np.float64)
    xv = _as_matrix(validation)
    yv = np.asarray(validation_labels, dtype=np.float64)
    if xv.shape[0] == 0:
        raise ValueError("validation set is empty")
    _check_classes(y)
    w = sample_weights(y, config.class_weight)
    names = tuple(getattr(train, "column_names", ()))
    theta = np.zeros(x.shape[1] + 1)
    velocity = np.zeros_like(theta)
    shuffle = rng.stream(sgd.seed, 11)
    best, best_theta, best_epoch, history = np.inf, theta.copy(), 0, []
    for epoch in range(1, sgd.max_epochs + 1):
        order = shuffle.permutation(x.shape[0])
        for start in range(0, x.shape[0], sgd.batch_size):
            idx = order[start:start + sgd.batch_size]
            loss, grad = _loss_grad(theta, x[idx], y[idx], config.C, None if w is None else w[idx])
            if not np.isfinite(loss):
                raise LinearFitError(f"loss diverged in epoch {epoch}", loss)
            velocity = sgd.momentum * velocity - sgd.learning_rate * grad
            theta = theta + velocity
        score = brier(expit(theta[0] + xv @ theta[1:]), yv)
        history.append(score)
        if score < best:
            best, best_theta, best_epoch = score, theta.copy(), epoch
        elif epoch - best_epoch >= sgd.patience:
            break
    params = LinearParams.from_vector(best_theta, names)
    if return_history:
        return params, SGDHistory(tuple(history), best_epoch)
    return params


def lr_fit(train, train_labels, validation=None, validation_labels=None,
           config: LinearFitConfig = LinearFitConfig()) -> LinearParams:
    if config.optimizer == "batch":
        return lr_fit_batch(train, train_labels, config)
    return lr_fit_sgd_earlystop(train, train_labels, validation, validation_labels, config)
