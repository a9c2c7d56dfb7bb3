"""Diagonal Gaussian mixtures with closed-form scores and optimal denoisers.

Nothing here touches the autodiff module, so comparing a learned denoiser with
these functions is an independent check rather than a tautology.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Mapping

import numpy as np
from scipy.special import logsumexp


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, d)
    variances: np.ndarray  # (k, d), diagonal covariances

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if var.shape != mu.shape or w.shape[0] != mu.shape[0]:
            raise ValueError(f"inconsistent mixture shapes {w.shape}, {mu.shape}, {var.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to 1")
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def smoothed(self, sigma: float) -> GaussianMixture:
        """Density of ``y + N(0, sigma^2 I)``."""
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        return GaussianMixture(self.weights, self.means, self.variances + sigma**2)

    @classmethod
    def from_dict(cls, spec: Mapping) -> GaussianMixture:
        return cls(np.asarray(spec["weights"]), np.asarray(spec["means"]), np.asarray(spec["variances"]))

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }


class ConditionalMixture:
    """A mixture over ``y`` for every value of a condition ``x``."""

    def __init__(self, slices: Mapping[Hashable, GaussianMixture]):
        self.slices = dict(slices)

    def given(self, x: Hashable) -> GaussianMixture:
        return self.slices[x]

    def __len__(self) -> int:
        return len(self.slices)


def _points(gm: GaussianMixture, y) -> tuple[np.ndarray, bool]:
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    y = np.atleast_2d(y)
    if y.shape[1] != gm.dim:
        raise ValueError(f"point dimension {y.shape[1]} != mixture dimension {gm.dim}")
    return y, single


def _component_log_terms(gm: GaussianMixture, y: np.ndarray) -> np.ndarray:
    """log w_k + log N(y; mu_k, diag v_k) for every point and component, shape (n, k)."""
    diff = y[:, None, :] - gm.means[None]
    quad = (diff**2 / gm.variances[None]).sum(axis=-1)
    log_norm = -0.5 * np.log(2 * np.pi * gm.variances).sum(axis=-1)
    with np.errstate(divide="ignore"):
        log_w = np.log(gm.weights)
    return log_w[None] + log_norm[None] - 0.5 * quad


def sample(gm: GaussianMixture, n: int, seed: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    comp = rng.choice(gm.n_components, size=n, p=gm.weights)
    noise = rng.standard_normal((n, gm.dim))
    return gm.means[comp] + np.sqrt(gm.variances[comp]) * noise


def log_density(gm: GaussianMixture, y) -> np.ndarray | float:
    pts, single = _points(gm, y)
    out = logsumexp(_component_log_terms(gm, pts), axis=1)
    return float(out[0]) if single else out


def responsibilities(gm: GaussianMixture, y) -> np.ndarray:
    pts, _ = _points(gm, y)
    terms = _component_log_terms(gm, pts)
    return np.exp(terms - logsumexp(terms, axis=1, keepdims=True))


def analytic_score(gm: GaussianMixture, y) -> np.ndarray:
    """Exact gradient of :func:`log_density`."""
    pts, single = _points(gm, y)
    gamma = responsibilities(gm, pts)
    per_comp = -(pts[:, None, :] - gm.means[None]) / gm.variances[None]
    out = (gamma[..., None] * per_comp).sum(axis=1)
    return out[0] if single else out


def smoothed_log_density(gm: GaussianMixture, sigma: float, y):
    return log_density(gm.smoothed(sigma), y)


def smoothed_score(gm: GaussianMixture, sigma: float, y) -> np.ndarray:
    return analytic_score(gm.smoothed(sigma), y)


def optimal_denoiser(gm: GaussianMixture, sigma: float, y_tilde) -> np.ndarray:
    """Posterior mean ``E[y | y_tilde]`` for ``y ~ gm`` and ``y_tilde = y + N(0, sigma^2 I)``.

    Computed as a responsibility-weighted sum of per-component Gaussian
    posterior means (a Wiener shrinkage toward each component mean), without
    going through any score function.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    pts, single = _points(gm, y_tilde)
    s2 = sigma**2
    noisy_var = gm.variances + s2
    diff = pts[:, None, :] - gm.means[None]
    log_terms = (
        np.log(np.where(gm.weights > 0, gm.weights, np.finfo(float).tiny))[None]
        - 0.5 * np.log(2 * np.pi * noisy_var).sum(axis=-1)[None]
        - 0.5 * (diff**2 / noisy_var[None]).sum(axis=-1)
    )
    post = np.exp(log_terms - logsumexp(log_terms, axis=1, keepdims=True))
    comp_mean = gm.means[None] + (gm.variances / noisy_var)[None] * diff
    out = (post[..., None] * comp_mean).sum(axis=1)
    return out[0] if single else out


def ascend(gm: GaussianMixture, sigma: float, y, eps: float, steps: int) -> np.ndarray:
    """Run ``y <- y + eps * sigma^2 * smoothed_score(y)`` and return the final iterate(s)."""
    y = np.array(y, dtype=np.float64)
    for _ in range(steps):
        y = y + eps * sigma**2 * smoothed_score(gm, sigma, y)
    return y


def find_modes(
    gm: GaussianMixture,
    sigma: float,
    lo,
    hi,
    resolution: int = 201,
    polish_steps: int = 2000,
    tol: float = 1e-10,
) -> np.ndarray:
    """Local maxima of the smoothed 2-D density inside the box ``[lo, hi]``.

    Grid cells larger than all eight neighbours seed a polishing gradient
    ascent; duplicates within one grid spacing are merged.
    """
    if gm.dim != 2:
        raise ValueError("find_modes is implemented for 2-D mixtures")
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    xs = np.linspace(lo[0], hi[0], resolution)
    ys = np.linspace(lo[1], hi[1], resolution)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    vals = smoothed_log_density(gm, sigma, np.stack([gx.ravel(), gy.ravel()], axis=1)).reshape(gx.shape)
    padded = np.pad(vals, 1, constant_values=-np.inf)
    is_max = np.ones_like(vals, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == dj == 0:
                continue
            shifted = padded[1 + di : 1 + di + resolution, 1 + dj : 1 + dj + resolution]
            is_max &= vals > shifted
    seeds = np.stack([gx[is_max], gy[is_max]], axis=1)
    smooth = gm.smoothed(sigma)
    step = 0.5 * float(smooth.variances.min())
    modes: list[np.ndarray] = []
    spacing = float(np.max((hi - lo) / (resolution - 1)))
    for y in seeds:
        for _ in range(polish_steps):
            move = step * analytic_score(smooth, y)
            y = y + move
            if np.linalg.norm(move) < tol:
                break
        if all(np.linalg.norm(y - m) > spacing for m in modes):
            modes.append(y)
    return np.array(modes).reshape(-1, 2)
