"""Reconstruction-level grids for one weight group.

Every builder has a batched form operating on arrays of per-group statistics
(shape ``(n,)``) and returning levels of shape ``(n, J)``.  The single-group
functions are thin wrappers over the batched ones so that quantization and
dequantization regenerate bit-identical levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SQRT3_OVER_PI = math.sqrt(3.0) / math.pi


@dataclass(frozen=True)
class GroupStats:
    mu: float
    sigma: float
    w_min: float
    w_max: float
    n: int = 0

    @classmethod
    def from_values(cls, w) -> "GroupStats":
        w = np.asarray(w, dtype=np.float64).ravel()
        mu, sigma, lo, hi = group_stats(w[None, :])
        return cls(float(mu[0]), float(sigma[0]), float(lo[0]), float(hi[0]), w.size)

    @property
    def degenerate(self) -> bool:
        return self.w_min == self.w_max or self.sigma == 0


@dataclass(frozen=True)
class QuantGrid:
    levels: np.ndarray
    kind: str  # "uniform" | "logistic" | "hybrid"
    gamma: float
    degenerate: bool = False

    def __len__(self) -> int:
        return self.levels.size


def group_stats(w: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise (mu, sigma, w_min, w_max) of a ``(n, g)`` array.

    Constant rows get ``mu = w_min`` and ``sigma = 0`` exactly, so every grid
    built from them collapses to the single stored value.
    """
    w = np.asarray(w, dtype=np.float64)
    lo = w.min(axis=1)
    hi = w.max(axis=1)
    mu = w.mean(axis=1)
    sigma = w.std(axis=1)
    const = lo == hi
    mu = np.where(const, lo, np.clip(mu, lo, hi))
    sigma = np.where(const, 0.0, sigma)
    return mu, sigma, lo, hi


def _check_levels(J: int) -> None:
    if J < 2:
        raise ValueError(f"need at least two levels, got J={J}")


def uniform_levels_batch(w_min, w_max, J: int) -> np.ndarray:
    _check_levels(J)
    lo = np.asarray(w_min, dtype=np.float64)[:, None]
    hi = np.asarray(w_max, dtype=np.float64)[:, None]
    step = (hi - lo) / (J - 1)
    levels = lo + np.arange(J, dtype=np.float64) * step
    levels[:, -1] = hi[:, 0]
    return levels


def logistic_levels_batch(mu, sigma, J: int) -> np.ndarray:
    _check_levels(J)
    mu = np.asarray(mu, dtype=np.float64)[:, None]
    theta = np.asarray(sigma, dtype=np.float64)[:, None] * SQRT3_OVER_PI
    p = (np.arange(J, dtype=np.float64) + 0.5) / J
    return mu + theta * np.log(p / (1.0 - p))


def hybrid_levels_batch(mu, sigma, w_min, w_max, J: int, gamma) -> np.ndarray:
    """``(1 - gamma) * logistic + gamma * uniform``; ``gamma`` scalar or per group."""
    g = np.asarray(gamma, dtype=np.float64)
    if np.any((g < 0) | (g > 1)):
        raise ValueError("gamma must lie in [0, 1]")
    logis = logistic_levels_batch(mu, sigma, J)
    uni = uniform_levels_batch(w_min, w_max, J)
    return blend_levels(logis, uni, g, np.asarray(w_min) == np.asarray(w_max))


def blend_levels(logis, uni, gamma, const) -> np.ndarray:
    """Blend precomputed endpoint grids; ``const`` rows keep the uniform grid.

    Shared by the encoder and the decoder so both produce identical levels.
    """
    g = np.asarray(gamma, dtype=np.float64)
    g = g.reshape(-1, 1) if g.ndim else g
    levels = (1.0 - g) * logis + g * uni
    # constant groups must stay lossless for every gamma
    if np.any(const):
        levels[const] = uni[const]
    return levels


def uniform_levels(stats: GroupStats, J: int) -> QuantGrid:
    if stats.w_min > stats.w_max:
        raise ValueError("w_min exceeds w_max")
    levels = uniform_levels_batch([stats.w_min], [stats.w_max], J)[0]
    return QuantGrid(levels, "uniform", 1.0, stats.w_min == stats.w_max)


def logistic_levels(stats: GroupStats, J: int) -> QuantGrid:
    """Inverse-CDF levels of a logistic fitted by mean and std.

    ``sigma == 0`` yields ``J`` copies of ``mu`` flagged as degenerate.
    Levels are not clamped to ``[w_min, w_max]``.
    """
    if stats.sigma < 0:
        raise ValueError("sigma must be >= 0")
    levels = logistic_levels_batch([stats.mu], [stats.sigma], J)[0]
    return QuantGrid(levels, "logistic", 0.0, stats.sigma == 0)


def hybrid_levels(stats: GroupStats, J: int, gamma: float) -> QuantGrid:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    levels = hybrid_levels_batch(
        [stats.mu], [stats.sigma], [stats.w_min], [stats.w_max], J, gamma
    )[0]
    return QuantGrid(levels, "hybrid", float(gamma), stats.degenerate)
