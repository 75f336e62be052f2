"""Seeded synthetic weights and calibration activations for desk-scale runs."""

from __future__ import annotations

import math

import numpy as np

from .tensorio import CalibrationSet, WeightTensor


def family_draws(family: str, size, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean, unit-variance draws from one of the reference families."""
    if family == "normal":
        return rng.standard_normal(size)
    if family == "laplace":
        return rng.laplace(0.0, 1.0 / math.sqrt(2.0), size)
    if family == "logistic":
        return rng.logistic(0.0, math.sqrt(3.0) / math.pi, size)
    raise ValueError(f"unknown family {family!r}")


def family_tensor(name, family, rows, cols, seed, scale=1.0) -> WeightTensor:
    rng = np.random.default_rng(seed)
    return WeightTensor(name, scale * family_draws(family, (rows, cols), rng))


def logistic_mixture_tensor(
    name: str, rows: int, cols: int, seed: int, base_scale: float = 0.02
) -> WeightTensor:
    """Row-wise logistic mixture resembling transformer weights.

    Each row has its own scale; 5% of entries come from a 3x wider component,
    which gives the heavier tails that make the hybrid grid useful.
    """
    rng = np.random.default_rng(seed)
    row_scale = base_scale * np.exp(0.3 * rng.standard_normal((rows, 1)))
    theta = row_scale * math.sqrt(3.0) / math.pi
    wide = rng.random((rows, cols)) < 0.05
    w = rng.logistic(0.0, 1.0, (rows, cols)) * theta * np.where(wide, 3.0, 1.0)
    return WeightTensor(name, w)


def gaussian_calibration(
    name: str,
    tokens: int,
    cols: int,
    seed: int,
    salient=(),
    salient_factor: float = 100.0,
) -> CalibrationSet:
    """Standard normal activations; ``salient`` columns are multiplied by ``salient_factor``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((tokens, cols))
    for c in salient:
        x[:, c] *= salient_factor
    return CalibrationSet(name, x)
