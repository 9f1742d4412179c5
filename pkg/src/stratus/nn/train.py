"""Minibatch training with momentum, plateau learning-rate reduction and
early stopping on the validation Brier score."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import rng
from . import layers as L
from .graph import NetworkSpec, apply_batch_stats, backward, forward, init_weights, trainable_keys


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    patience: int = 20
    reduce_lr: bool = True
    plateau_epochs: int = 10
    lr_factor: float = 0.1
    max_epochs: int = 200
    seed: int = 0
    stop_below_train_brier: float | None = None
    eval_batch_size: int = 16

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.reduce_lr and self.plateau_epochs > self.patience:
            raise ValueError("plateau window must not exceed the early-stopping patience")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


@dataclass(frozen=True)
class ImageSet:
    """Network inputs and gathered labels for a set of days."""

    main: np.ndarray    # (N, H, W, C_main)
    late: np.ndarray    # (N, H, W, C_late)
    labels: np.ndarray  # (N, n_valid)
    mask: np.ndarray    # (H, W) bool

    def __len__(self):
        return self.main.shape[0]

    def batch(self, idx) -> dict:
        return {"main": self.main[idx], "late": self.late[idx]}

    def take(self, idx) -> "ImageSet":
        return ImageSet(self.main[idx], self.late[idx], self.labels[idx], self.mask)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_brier: float
    lr: float
    val_loss: float
    train_brier: float


@dataclass
class TrainResult:
    weights: dict
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    diverged: bool = False

    def write_history(self, path: str | Path):
        write_history(path, self.history)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


def write_history(path: str | Path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_brier", "lr", "val_loss", "train_brier"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_brier), repr(r.lr), repr(r.val_loss),
                        repr(r.train_brier)])


def predict(spec: NetworkSpec, weights: dict, data: ImageSet, batch_size: int = 16) -> np.ndarray:
    """Inference-mode probabilities, (N, n_valid)."""
    out = []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(len(data), start + batch_size))
        p, _ = forward(spec, weights, data.batch(idx), data.mask, training=False)
        out.append(p)
    return np.concatenate(out)


def _scores(p: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    loss, _ = L.masked_log_loss(p.astype(np.float64), y.astype(np.float64))
    return loss, float(np.mean((p.astype(np.float64) - y) ** 2))


def train(spec: NetworkSpec, train_set: ImageSet, val_set: ImageSet, config: TrainerConfig = TrainerConfig(),
          weights: dict | None = None) -> TrainResult:
    """Train and restore the weights of the epoch with the best validation
    Brier score.  Epochs are numbered from 1; with no improvement after
    epoch ``b`` training stops at epoch ``b + patience``."""
    if len(val_set) == 0:
        raise ValueError("validation set is empty")
    h, w = train_set.mask.shape
    if weights is None:
        weights = init_weights(spec, h, w, config.seed, dtype=train_set.main.dtype)
    weights = {k: v.copy() for k, v in weights.items()}
    keys = trainable_keys(spec, h, w)
    velocity = {k: np.zeros_like(weights[k]) for k in keys}
    shuffle = rng.stream(config.seed, 31)
    lr = config.learning_rate
    best, best_epoch, best_weights = np.inf, 0, {k: v.copy() for k, v in weights.items()}
    wait = 0
    result = TrainResult(best_weights)
    n = len(train_set)
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle.permutation(n)
        loss_sum = brier_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            y = train_set.labels[idx].astype(weights[keys[0]].dtype)
            p, tape = forward(spec, weights, train_set.batch(idx), train_set.mask, training=True)
            loss, dp = L.masked_log_loss(p, y)
            if not np.isfinite(loss):
                result.diverged = True
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}", result.history)
            grads = backward(spec, weights, tape, dp, train_set.mask)
            for k in keys:
                velocity[k] = config.momentum * velocity[k] - lr * grads[k]
                weights[k] += velocity[k]
            apply_batch_stats(weights, tape)
            loss_sum += loss * idx.size
            brier_sum += float(np.mean((p.astype(np.float64) - y) ** 2)) * idx.size
        pv = predict(spec, weights, val_set, config.eval_batch_size)
        val_loss, val_brier = _scores(pv, val_set.labels)
        record = EpochRecord(epoch, loss_sum / n, val_brier, lr, val_loss, brier_sum / n)
        result.history.append(record)
        if not np.isfinite(val_brier):
            result.diverged = True
            raise TrainingDiverged(f"non-finite validation score in epoch {epoch}", result.history)
        if val_brier < best:
            best, best_epoch, wait = val_brier, epoch, 0
            best_weights = {k: v.copy() for k, v in weights.items()}
        else:
            wait += 1
            if config.reduce_lr and wait >= config.plateau_epochs and wait % config.plateau_epochs == 0:
                lr *= config.lr_factor
        if config.stop_below_train_brier is not None and record.train_brier < config.stop_below_train_brier:
            break
        if epoch - best_epoch >= config.patience:
            result.stopped_early = True
            break
    result.weights = best_weights
    result.best_epoch = best_epoch
    return result


@dataclass(frozen=True)
class LossPlateau:
    """Shape of a finished loss curve.

    ``max_val_rise`` is the largest excess of validation loss over its
    running minimum, relative to that minimum; the ``*_change`` fields are
    relative changes over the last ``window`` epochs."""

    max_val_rise: float
    val_change: float
    train_change: float
    window: int

    def plateaued(self, val_tol: float = 0.02, train_tol: float = 0.05, rise_tol: float = 0.05) -> bool:
        return self.max_val_rise <= rise_tol and self.val_change <= val_tol and self.train_change <= train_tol


def loss_plateau(history, window: int = 10) -> LossPlateau:
    if len(history) <= window:
        raise ValueError(f"need more than {window} epochs, got {len(history)}")
    val = np.array([r.val_loss for r in history])
    tr = np.array([r.train_loss for r in history])
    running = np.minimum.accumulate(val)
    change = lambda x: float(abs(x[-1] - x[-1 - window]) / abs(x[-1 - window]))
    return LossPlateau(float(np.max(val / running - 1.0)), change(val), change(tr), window)
