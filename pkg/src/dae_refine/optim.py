"""RMSprop with L2 weight decay, per-epoch exponential learning-rate decay and early stopping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, MutableMapping, Sequence

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor, backward


@dataclass
class TrainSchedule:
    lr0: float = 1e-3
    decay: float = 0.99
    weight_decay: float = 1e-4
    batch_size: int = 10
    patience_epochs: int = 30
    max_epochs: int = 200
    rho: float = 0.9
    eps_div: float = 1e-8

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.patience_epochs < 1:
            raise ValueError("patience_epochs must be at least 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be at least 1")
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")


@dataclass
class RmspropState:
    rho: float = 0.9
    eps_div: float = 1e-8
    acc: dict[str, np.ndarray] = field(default_factory=dict)


def rmsprop_step(
    params: MutableMapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: RmspropState,
    lr: float,
    weight_decay: float = 0.0,
) -> None:
    """Update ``params`` in place.

    The decay term is folded into the gradient before it enters the squared
    accumulator: ``g <- g + wd * p``.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if weight_decay:
            g = g + weight_decay * p.data
        acc = state.acc.get(name)
        if acc is None:
            acc = np.zeros_like(p.data)
        acc = state.rho * acc + (1.0 - state.rho) * g * g
        state.acc[name] = acc
        p.data = p.data - lr * g / (np.sqrt(acc) + state.eps_div)


def epoch_lr(schedule: TrainSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return schedule.lr0 * schedule.decay**epoch


def early_stop(history: Sequence[float], patience: int) -> bool:
    """True once the best (strictly lowest, first occurrence) loss is more than ``patience`` epochs old."""
    if not history:
        raise ValueError("history must be non-empty")
    best = int(np.argmin(np.asarray(history)))
    return len(history) - 1 - best > patience


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}{': ' + detail if detail else ''}")
        self.epoch = epoch


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "lr": self.lr,
            "best_epoch": self.best_epoch,
        }


def fit(
    params: MutableMapping[str, Tensor],
    n_train: int,
    batch_loss,
    val_loss,
    schedule: TrainSchedule,
    rng: np.random.Generator,
    log=None,
) -> History:
    """Minibatch RMSprop with early stopping; leaves ``params`` at the best validation epoch.

    ``batch_loss(indices, epoch)`` returns a scalar :class:`Tensor` built from
    ``params``; ``val_loss()`` returns a float.
    """
    state = RmspropState(rho=schedule.rho, eps_div=schedule.eps_div)
    hist = History()
    best = {k: p.data.copy() for k, p in params.items()}
    for epoch in range(schedule.max_epochs):
        lr = epoch_lr(schedule, epoch)
        order = rng.permutation(n_train)
        total, count = 0.0, 0
        try:
            for start in range(0, n_train, schedule.batch_size):
                idx = order[start : start + schedule.batch_size]
                loss = batch_loss(idx, epoch)
                grads = backward(loss, params)
                rmsprop_step(params, grads, state, lr, schedule.weight_decay)
                total += loss.item() * len(idx)
                count += len(idx)
            v = float(val_loss())
        except NonFiniteError as exc:
            raise TrainingDiverged(epoch, str(exc)) from exc
        if not np.isfinite(v):
            raise TrainingDiverged(epoch, "validation loss is not finite")
        hist.train_loss.append(total / count)
        hist.val_loss.append(v)
        hist.lr.append(lr)
        if int(np.argmin(hist.val_loss)) == epoch:
            hist.best_epoch = epoch
            best = {k: p.data.copy() for k, p in params.items()}
        if log is not None:
            log(f"epoch {epoch:3d}  lr {lr:.2e}  train {hist.train_loss[-1]:.5f}  val {v:.5f}")
        if early_stop(hist.val_loss, schedule.patience_epochs):
            break
    for k, p in params.items():
        p.data = best[k]
    return hist
