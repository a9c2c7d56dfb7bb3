"""Mean-field inference for a grid Potts CRF, the classical post-processing baseline."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .metrics import ConfusionMatrix, mean_iou
from .tensor import LOG_CLAMP


@dataclass(frozen=True)
class GridCrfConfig:
    pairwise_weight: float = 1.0
    neighborhood: int = 8
    iterations: int = 5
    spatial_sigma: float = 1.0

    def __post_init__(self):
        if self.pairwise_weight < 0:
            raise ValueError("pairwise_weight must be non-negative")
        if self.neighborhood not in (4, 8):
            raise ValueError("neighborhood must be 4 or 8")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.spatial_sigma <= 0:
            raise ValueError("spatial_sigma must be positive")


def _offsets(cfg: GridCrfConfig) -> list[tuple[int, int, float]]:
    if cfg.neighborhood == 4:
        return [(-1, 0, 1.0), (1, 0, 1.0), (0, -1, 1.0), (0, 1, 1.0)]
    out = []
    for di, dj in itertools.product((-1, 0, 1), repeat=2):
        if di == dj == 0:
            continue
        out.append((di, dj, float(np.exp(-(di * di + dj * dj) / (2 * cfg.spatial_sigma**2)))))
    return out


def _neighbour_sum(q: np.ndarray, offsets) -> np.ndarray:
    """sum_j k(i, j) q_j over in-image neighbours, for (..., H, W) arrays."""
    h, w = q.shape[-2:]
    padded = np.pad(q, [(0, 0)] * (q.ndim - 2) + [(1, 1), (1, 1)])
    out = np.zeros_like(q)
    for di, dj, k in offsets:
        out += k * padded[..., 1 + di : 1 + di + h, 1 + dj : 1 + dj + w]
    return out


def meanfield(unary: np.ndarray, cfg: GridCrfConfig) -> np.ndarray:
    """Synchronous mean-field updates of a Potts grid CRF.

    ``unary`` holds per-pixel class probabilities with the class axis at -3
    (``(K, H, W)`` or ``(N, K, H, W)``).  Each sweep sets
    ``Q_i(l) ∝ exp(log u_i(l) + w * sum_j k(i, j) Q_j(l))``.
    """
    u = np.asarray(unary, dtype=np.float64)
    if u.ndim < 3:
        raise ValueError("unary needs a class axis and two spatial axes")
    if np.any(u < 0) or np.max(np.abs(u.sum(axis=-3) - 1.0)) > 1e-6:
        raise ValueError("unary must lie on the per-pixel simplex")
    q = u.copy()
    if cfg.pairwise_weight == 0 or cfg.iterations == 0:
        return q
    log_u = np.log(np.maximum(u, LOG_CLAMP))
    offsets = _offsets(cfg)
    for _ in range(cfg.iterations):
        logits = log_u + cfg.pairwise_weight * _neighbour_sum(q, offsets)
        logits -= logits.max(axis=-3, keepdims=True)
        e = np.exp(logits)
        q = e / e.sum(axis=-3, keepdims=True)
    return q


def config_grid(
    weights: Iterable[float],
    neighborhoods: Iterable[int],
    iterations: Iterable[int],
    spatial_sigmas: Iterable[float],
) -> list[GridCrfConfig]:
    sigmas = list(spatial_sigmas)
    out = []
    for w, nb, it, s in itertools.product(weights, neighborhoods, iterations, sigmas):
        if nb == 4 and s != sigmas[0]:
            continue  # spatial_sigma only matters on the 8-neighbourhood
        out.append(GridCrfConfig(w, nb, it, s))
    return out


def tune(unary: np.ndarray, labels: np.ndarray, grid: Sequence[GridCrfConfig]) -> tuple[GridCrfConfig, float]:
    """Grid search maximising validation mean IoU; earlier grid entries win ties."""
    k = unary.shape[-3]
    best_cfg, best_iou = None, -np.inf
    for cfg in grid:
        pred = meanfield(unary, cfg).argmax(axis=-3)
        score = mean_iou(ConfusionMatrix(k).accumulate(labels, pred))
        if score > best_iou:
            best_cfg, best_iou = cfg, score
    return best_cfg, float(best_iou)
