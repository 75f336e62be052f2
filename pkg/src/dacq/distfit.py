"""Goodness-of-fit of weight samples against zero-mean, unit-variance references.

Samples are standardized with the population standard deviation, then their
empirical quantiles are compared with the Normal, Laplace and Logistic inverse
CDFs at midpoint probe probabilities.  RMSE in quantile space weights the
tails, MAE the dense center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .tensorio import WeightTensor

FAMILIES = ("normal", "laplace", "logistic")

LAPLACE_SCALE = 1.0 / math.sqrt(2.0)
LOGISTIC_SCALE = math.sqrt(3.0) / math.pi

DEFAULT_PROBES = 1000


class DegenerateSampleError(ValueError):
    """The sample has fewer than two values or zero variance."""


@dataclass
class StandardizedSample:
    values: np.ndarray  # sorted ascending
    mu: float
    sigma: float

    @property
    def n(self) -> int:
        return self.values.size


@dataclass
class FamilyFit:
    family: str
    rmse: float
    mae: float


@dataclass
class FitReport:
    tensor_name: str
    n_samples: int
    fits: list[FamilyFit]
    best_family: str
    # (theoretical, empirical) quantile pairs for the winning family
    qq_pairs: np.ndarray = field(repr=False)
    probes: np.ndarray = field(repr=False)

    def metrics(self, family: str) -> FamilyFit:
        return next(f for f in self.fits if f.family == family)

    def to_dict(self) -> dict:
        return {
            "tensor_name": self.tensor_name,
            "n_samples": self.n_samples,
            "best_family": self.best_family,
            "fits": [{"family": f.family, "rmse": f.rmse, "mae": f.mae} for f in self.fits],
        }


def sample_weights(t: WeightTensor, n: int, seed: int) -> np.ndarray:
    """Draw ``min(n, size)`` weights uniformly without replacement.

    When ``n`` covers the whole tensor every value is returned in storage
    order, so the result does not depend on the seed.
    """
    if n < 2:
        raise ValueError(f"sample size must be >= 2, got {n}")
    flat = t.data.ravel()
    if flat.size == 0:
        raise DegenerateSampleError(f"tensor {t.name!r} is empty")
    if n >= flat.size:
        return flat.astype(np.float64)
    rng = np.random.default_rng(seed)
    pick = rng.choice(flat.size, size=n, replace=False)
    return flat[pick].astype(np.float64)


def standardize(x) -> StandardizedSample:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size < 2:
        raise DegenerateSampleError("need at least two values to standardize")
    mu = float(x.mean())
    sigma = float(x.std())
    if not sigma > 0:
        raise DegenerateSampleError("sample has zero variance")
    return StandardizedSample(np.sort((x - mu) / sigma), mu, sigma)


def probe_probabilities(m: int) -> np.ndarray:
    if m < 2:
        raise ValueError(f"need at least two probe quantiles, got {m}")
    return (np.arange(m) + 0.5) / m


def theoretical_quantiles(family: str, probs) -> np.ndarray:
    """Inverse CDF of the unit-variance reference ``family`` at ``probs``."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    if family == "normal":
        return ndtri(p)
    if family == "laplace":
        d = p - 0.5
        return -LAPLACE_SCALE * np.sign(d) * np.log1p(-2.0 * np.abs(d))
    if family == "logistic":
        return LOGISTIC_SCALE * np.log(p / (1.0 - p))
    raise ValueError(f"unknown family {family!r}")


def empirical_quantiles(s: StandardizedSample, probs) -> np.ndarray:
    """Linear interpolation between order statistics at positions (i+0.5)/n.

    Probabilities outside the first/last plotting position clamp to the
    sample extremes.
    """
    positions = (np.arange(s.n) + 0.5) / s.n
    return np.interp(np.asarray(probs, dtype=np.float64), positions, s.values)


def quantile_errors(q_emp, q_theo) -> tuple[float, float]:
    diff = np.asarray(q_emp, dtype=np.float64) - np.asarray(q_theo, dtype=np.float64)
    return float(np.sqrt(np.mean(diff**2))), float(np.mean(np.abs(diff)))


def quantile_fit_metrics(
    s: StandardizedSample, family: str, m: int = DEFAULT_PROBES
) -> tuple[float, float]:
    """Return ``(rmse, mae)`` between empirical and ``family`` quantiles."""
    p = probe_probabilities(m)
    return quantile_errors(empirical_quantiles(s, p), theoretical_quantiles(family, p))


def _pick_best(fits: list[FamilyFit]) -> str:
    # FAMILIES order breaks exact ties after rmse and mae
    order = {f: i for i, f in enumerate(FAMILIES)}
    return min(fits, key=lambda f: (f.rmse, f.mae, order[f.family])).family


def fit_sample(name: str, x, m: int = DEFAULT_PROBES) -> FitReport:
    s = standardize(x)
    p = probe_probabilities(m)
    q_emp = empirical_quantiles(s, p)
    fits = []
    theo = {}
    for family in FAMILIES:
        theo[family] = theoretical_quantiles(family, p)
        rmse, mae = quantile_errors(q_emp, theo[family])
        fits.append(FamilyFit(family, rmse, mae))
    best = _pick_best(fits)
    return FitReport(
        tensor_name=name,
        n_samples=s.n,
        fits=fits,
        best_family=best,
        qq_pairs=np.column_stack([theo[best], q_emp]),
        probes=p,
    )


def best_fit(
    t: WeightTensor, n: int = 1_000_000, m: int = DEFAULT_PROBES, seed: int = 0
) -> FitReport:
    """Sample, standardize and rank the three reference families for ``t``."""
    return fit_sample(t.name, sample_weights(t, n, seed), m)


def qq_table(x, m: int = DEFAULT_PROBES) -> np.ndarray:
    """Rows of ``(p, q_normal, q_laplace, q_logistic, q_empirical)``."""
    s = x if isinstance(x, StandardizedSample) else standardize(x)
    p = probe_probabilities(m)
    cols = [p] + [theoretical_quantiles(f, p) for f in FAMILIES] + [empirical_quantiles(s, p)]
    return np.column_stack(cols)


def summarize_models(reports: list[FitReport]) -> dict:
    """Best-fit tally plus mean/std of each family's RMSE and MAE across tensors."""
    tally = {f: 0 for f in FAMILIES}
    for r in reports:
        tally[r.best_family] += 1
    stats = {}
    for family in FAMILIES:
        rmse = np.array([r.metrics(family).rmse for r in reports])
        mae = np.array([r.metrics(family).mae for r in reports])
        stats[family] = {
            "rmse_mean": float(rmse.mean()) if rmse.size else float("nan"),
            "rmse_std": float(rmse.std()) if rmse.size else float("nan"),
            "mae_mean": float(mae.mean()) if mae.size else float("nan"),
            "mae_std": float(mae.std()) if mae.size else float("nan"),
        }
    return {"n_tensors": len(reports), "best_fit_counts": tally, "metrics": stats}
