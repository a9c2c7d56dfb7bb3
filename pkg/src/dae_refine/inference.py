"""Iterative refinement with a trained DAE and the (epsilon, iterations) validation sweep."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dae import DaeModel, reconstruct, score
from .metrics import ConfusionMatrix, mean_iou
from .segmenter import predict_argmax

DEFAULT_EPSILON_GRID = (0.01, 0.02, 0.05, 0.08, 0.1, 0.5, 1.0)


class NonFiniteIterate(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"refinement produced a non-finite iterate at step {step}")
        self.step = step


class DivergedTrajectory(RuntimeError):
    def __init__(self, step: int, norm: float, limit: float):
        super().__init__(f"iterate norm {norm:.3g} exceeded {limit:.3g} at step {step}")
        self.step = step


@dataclass(frozen=True)
class InferenceConfig:
    epsilon: float = 0.1
    max_iters: int = 50
    epsilon_grid: tuple[float, ...] = DEFAULT_EPSILON_GRID
    iter_cap: int = 50

    def __post_init__(self):
        grid = tuple(float(e) for e in self.epsilon_grid)
        object.__setattr__(self, "epsilon_grid", grid)
        if not grid or any(e <= 0 for e in grid) or list(grid) != sorted(grid):
            raise ValueError("epsilon_grid must be non-empty, positive and sorted")
        if self.iter_cap < 1 or self.max_iters < 0:
            raise ValueError("iter_cap must be >= 1 and max_iters >= 0")


@dataclass
class RefinementTrajectory:
    iterates: list[np.ndarray] = field(default_factory=list)
    mean_iou: list[float] = field(default_factory=list)
    stop_index: int = 0
    final: np.ndarray | None = None


def _miou(y: np.ndarray, labels: np.ndarray) -> float:
    k = y.shape[-3]
    return mean_iou(ConfusionMatrix(k).accumulate(labels, predict_argmax(y)))


def refine(
    y0: np.ndarray,
    h: np.ndarray,
    model: DaeModel,
    epsilon: float,
    n_iters: int,
    labels: np.ndarray | None = None,
    keep_iterates: bool = True,
) -> RefinementTrajectory:
    """Run ``y <- y + epsilon * (r(y, h) - y)`` for exactly ``n_iters`` steps, noise-free.

    Iterates are not projected back onto the simplex.  With ``labels`` the
    mean IoU of every iterate's argmax is recorded.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    y = np.array(y0, dtype=np.float64)
    traj = RefinementTrajectory(stop_index=n_iters)
    if keep_iterates:
        traj.iterates.append(y.copy())
    if labels is not None:
        traj.mean_iou.append(_miou(y, labels))
    for step in range(1, n_iters + 1):
        if epsilon:
            r = reconstruct(model, y, h)
            # convex-combination form keeps epsilon = 1 an exact denoising pass;
            # overflow surfaces as NonFiniteIterate below
            with np.errstate(over="ignore", invalid="ignore"):
                y = (1.0 - epsilon) * y + epsilon * r
            if not np.isfinite(y).all():
                raise NonFiniteIterate(step)
        if keep_iterates:
            traj.iterates.append(y.copy())
        if labels is not None:
            traj.mean_iou.append(_miou(y, labels))
    traj.final = y
    return traj


@dataclass
class SweepResult:
    surface: dict[float, list[float]]
    best_epsilon: float
    best_iters: int
    best_iou: float

    def argmax_iteration(self, epsilon: float) -> int:
        row = np.asarray(self.surface[epsilon])
        return int(np.argmax(row))

    def max_iou(self, epsilon: float) -> float:
        return float(np.max(self.surface[epsilon]))

    def to_dict(self) -> dict:
        return {"epsilon": self.best_epsilon, "iterations": self.best_iters, "mean_iou": self.best_iou}


def select_best(surface: dict[float, Sequence[float]]) -> tuple[float, int, float]:
    """Argmax over the surface; ties prefer fewer iterations, then smaller epsilon."""
    best = (-np.inf, 0, 0.0)
    n_iter = max(len(v) for v in surface.values())
    for it in range(n_iter):
        for eps in sorted(surface):
            row = surface[eps]
            if it < len(row) and row[it] > best[0]:
                best = (row[it], it, eps)
    return best[2], best[1], float(best[0])


def sweep(
    model: DaeModel,
    y0: np.ndarray,
    h: np.ndarray,
    labels: np.ndarray,
    cfg: InferenceConfig,
) -> SweepResult:
    """Mean IoU for every epsilon in the grid and every iteration up to ``iter_cap``."""
    if y0.shape[0] == 0:
        raise ValueError("validation set is empty")
    surface = {}
    for eps in cfg.epsilon_grid:
        traj = refine(y0, h, model, eps, cfg.iter_cap, labels=labels, keep_iterates=False)
        surface[eps] = traj.mean_iou
    eps, it, iou = select_best(surface)
    return SweepResult(surface, eps, it, iou)


def write_surface_csv(path: str | Path, result: SweepResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epsilon", "iteration", "mean_iou"])
        for eps in sorted(result.surface):
            for it, v in enumerate(result.surface[eps]):
                writer.writerow([f"{eps:g}", it, f"{v:.6f}"])


def read_surface_csv(path: str | Path) -> dict[float, list[float]]:
    surface: dict[float, list[float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            surface.setdefault(float(row["epsilon"]), []).append(float(row["mean_iou"]))
    return surface


# ---------------------------------------------------------------------------
# low-dimensional mode seeking


def refine_density(
    points: np.ndarray,
    model: DaeModel,
    epsilon: float,
    n_steps: int,
    diameter: float | None = None,
) -> np.ndarray:
    """Ascend the learned score: ``y <- y + epsilon * (r(y) - y) / sigma^2``.

    Returns every iterate, shape ``(n_steps + 1, n_points, d)``.  Raises
    :class:`DivergedTrajectory` if any iterate strays further than ten data
    diameters from the training data centre.
    """
    if model.conditional:
        raise ValueError("refine_density needs the unconditional (dense) DAE")
    y = np.atleast_2d(np.array(points, dtype=np.float64))
    diameter = diameter if diameter is not None else model.meta.get("data_diameter")
    centre = np.asarray(model.meta.get("data_centre", np.zeros(y.shape[1])))
    out = [y.copy()]
    for step in range(1, n_steps + 1):
        y = y + epsilon * score(model, y).field
        if diameter is not None:
            norm = float(np.max(np.linalg.norm(y - centre, axis=1)))
            if not np.isfinite(norm) or norm > 10 * diameter:
                raise DivergedTrajectory(step, norm, 10 * diameter)
        out.append(y.copy())
    return np.stack(out)
