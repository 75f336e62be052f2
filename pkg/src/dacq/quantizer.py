"""Group-wise non-uniform weight quantization.

Each row of the (optionally channel-scaled) weight matrix is split into
contiguous groups of ``group_size`` input columns.  For every group a grid of
``J = 2**bits`` levels is built from its statistics, weights are projected to
the nearest level and, in hybrid mode, the logistic/uniform mixing weight
``gamma`` is chosen from ``{k/20}`` to minimise the group's activation output
error ``sum_t ((w - w_q) . x_t)**2``.

Group statistics, gamma and channel scales are rounded to float32 *before*
building the grids that are searched, so the stored artifact regenerates
exactly the levels the search evaluated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import grids
from .grids import QuantGrid
from .tensorio import (
    FLAG_DEGENERATE,
    FLAG_WEIGHT_FALLBACK,
    GROUP_DTYPE,
    KIND_CODES,
    SUPPORTED_BITS,
    CalibrationSet,
    QuantizedTensor,
    WeightTensor,
    pack_indices,
    validate_quantized,
)

MODES = ("uniform", "logistic", "hybrid")

# float32-representable so the stored gamma reproduces the searched grid
GAMMA_GRID = np.arange(21, dtype=np.float64) / 20
GAMMA_GRID = GAMMA_GRID.astype(np.float32).astype(np.float64)


def _f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).astype(np.float32).astype(np.float64)


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    group_size: int = 128
    mode: str = "hybrid"

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ValueError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def levels(self) -> int:
        return 1 << self.bits

    def gamma_grid(self) -> np.ndarray:
        if self.mode == "uniform":
            return np.array([1.0])
        if self.mode == "logistic":
            return np.array([0.0])
        return GAMMA_GRID


@dataclass
class GroupView:
    row: int
    col_start: int
    values: np.ndarray
    activations: np.ndarray  # tokens x len(values)


@dataclass
class GammaSearchResult:
    gamma_star: float
    errors: list[tuple[float, float]]
    chosen_grid: QuantGrid
    weight_fallback: bool = False

    @property
    def error_star(self) -> float:
        return dict(self.errors)[self.gamma_star]


@dataclass
class QuantizeReport:
    """Per-group search diagnostics, row-major group order."""

    gammas: np.ndarray
    gamma_star: np.ndarray
    error_table: np.ndarray  # n_groups x len(gammas)
    error_star: np.ndarray
    degenerate: np.ndarray
    weight_fallback: bool = False

    @property
    def total_error(self) -> float:
        return float(np.sum(self.error_star))

    def gamma_histogram(self) -> list[int]:
        k = np.rint(self.gamma_star * 20).astype(int)
        return np.bincount(k, minlength=21).tolist()


# ---------------------------------------------------------------------------
# Nearest-level assignment
# ---------------------------------------------------------------------------


def _resolve(w, levels, upper):
    """Pick between the bracketing levels; ties go to the lower index.

    ``levels`` is ``(n, J)`` and ``upper`` the per-weight insertion point.
    Returns ``(index, chosen level)``.
    """
    n, J = levels.shape
    flat = levels.ravel()
    base = (np.arange(n) * J)[:, None]
    up = np.minimum(upper, J - 1)
    dn = np.maximum(upper - 1, 0)
    l_up = flat[base + up]
    l_dn = flat[base + dn]
    lower = np.abs(w - l_dn) <= np.abs(w - l_up)
    return np.where(lower, dn, up), np.where(lower, l_dn, l_up)


def _count_below(levels, w):
    # per-row searchsorted(levels, w, side="left")
    if w.size * levels.shape[1] <= 1 << 16:
        # small blocks: one broadcast beats a python loop over levels
        return np.sum(levels[:, None, :] < w[:, :, None], axis=2, dtype=np.int16)
    count = np.zeros(w.shape, dtype=np.int16)
    for j in range(levels.shape[1]):
        np.add(count, levels[:, j, None] < w, out=count, casting="unsafe")
    return count


def nearest_levels(w: np.ndarray, levels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest level for each row of ``w`` (n, g) against ``levels`` (n, J).

    Returns ``(indices, quantized values)``.  Among duplicate levels the
    lowest index is reported.
    """
    w = np.asarray(w, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float64)
    idx, wq = _resolve(w, levels, _count_below(levels, w))
    dup = np.any(levels[:, 1:] == levels[:, :-1], axis=1)
    if np.any(dup):
        idx[dup] = _count_below(levels[dup], wq[dup])
    return idx, wq


def assign_nearest_batch(w: np.ndarray, levels: np.ndarray) -> np.ndarray:
    return nearest_levels(w, levels)[0]


def assign_nearest(w, grid) -> np.ndarray:
    """Index of the nearest level by binary search, lower index on ties."""
    levels = np.asarray(getattr(grid, "levels", grid), dtype=np.float64)
    if levels.size == 0:
        raise ValueError("grid is empty")
    w = np.asarray(w, dtype=np.float64).ravel()
    upper = np.searchsorted(levels, w, side="left")
    idx = _resolve(w, levels[None, :], upper[None, :])[0][0]
    if np.any(np.diff(levels) == 0):
        idx = np.searchsorted(levels, levels[idx], side="left")
    return idx.astype(np.int64)


def assign_nearest_linear(w, levels) -> np.ndarray:
    """O(n*J) scan; reference for :func:`assign_nearest`."""
    w = np.asarray(w, dtype=np.float64).ravel()
    levels = np.asarray(levels, dtype=np.float64)
    return np.argmin(np.abs(w[:, None] - levels[None, :]), axis=1)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


def group_errors(resid: np.ndarray, x: np.ndarray | None, inv_scale=None) -> np.ndarray:
    """Per-row output error of a ``(n, g)`` residual block.

    ``x`` is the ``(tokens, g)`` activation slice.  With no activations the
    weight-space fallback ``sum(resid**2)`` is used (residual first mapped
    back to the unscaled domain by ``inv_scale``).
    """
    if x is None or x.shape[0] == 0:
        r = resid if inv_scale is None else resid * inv_scale
        return np.sum(r * r, axis=1)
    out = resid @ x.T
    return np.sum(out * out, axis=1)


def activation_error(w, w_q, x_cols) -> float:
    """``||(w - w_q)^T x||^2`` summed over tokens for one group."""
    w = np.asarray(w, dtype=np.float64).ravel()
    w_q = np.asarray(w_q, dtype=np.float64).ravel()
    x = np.atleast_2d(np.asarray(x_cols, dtype=np.float64))
    if w.shape != w_q.shape:
        raise ValueError("w and w_q differ in length")
    if x.size and x.shape[1] != w.size:
        raise ValueError(f"activation slice has {x.shape[1]} columns, group has {w.size}")
    return float(group_errors((w - w_q)[None, :], x if x.size else None)[0])


# ---------------------------------------------------------------------------
# Block search
# ---------------------------------------------------------------------------


def stored_stats(ws: np.ndarray):
    """float32-rounded (mu, sigma, w_min, w_max) for each row of ``ws``."""
    mu, sigma, lo, hi = (_f32(a) for a in grids.group_stats(ws))
    const = lo == hi
    mu = np.where(const, lo, np.clip(mu, lo, hi))
    sigma = np.where(const, 0.0, sigma)
    return mu, sigma, lo, hi


@dataclass
class _BlockResult:
    mu: np.ndarray
    sigma: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    gamma_star: np.ndarray
    idx: np.ndarray
    table: np.ndarray
    e_star: np.ndarray
    levels: np.ndarray = field(repr=False)


def _search_block(ws, x, J, gammas, inv_scale=None) -> _BlockResult:
    mu, sigma, lo, hi = stored_stats(ws)
    n = ws.shape[0]
    table = np.empty((n, len(gammas)))
    best_e = np.full(n, np.inf)
    best_g = np.zeros(n)
    best_idx = np.zeros(ws.shape, dtype=np.uint8 if J <= 256 else np.int64)
    best_levels = np.zeros((n, J))
    logis = grids.logistic_levels_batch(mu, sigma, J)
    uni = grids.uniform_levels_batch(lo, hi, J)
    const = lo == hi
    for k, gamma in enumerate(gammas):
        levels = grids.blend_levels(logis, uni, gamma, const)
        idx, wq = nearest_levels(ws, levels)
        e = group_errors(ws - wq, x, inv_scale)
        table[:, k] = e
        better = e < best_e  # strict: ties keep the smaller gamma
        best_e = np.where(better, e, best_e)
        best_g = np.where(better, gamma, best_g)
        best_idx[better] = idx[better]
        best_levels[better] = levels[better]
    return _BlockResult(mu, sigma, lo, hi, best_g, best_idx, table, best_e, best_levels)


def quantize_group(g_view: GroupView, J: int, gamma_grid=GAMMA_GRID):
    """Search gamma for one group; returns ``(GammaSearchResult, indices)``."""
    ws = np.asarray(g_view.values, dtype=np.float64)[None, :]
    x = np.asarray(g_view.activations, dtype=np.float64)
    fallback = x.size == 0
    if not fallback and x.shape[1] != ws.shape[1]:
        raise ValueError("activation slice does not match group width")
    gammas = _f32(np.atleast_1d(gamma_grid))
    res = _search_block(ws, None if fallback else x, J, gammas)
    g_star = float(res.gamma_star[0])
    kind = "uniform" if len(gammas) == 1 and gammas[0] == 1 else (
        "logistic" if len(gammas) == 1 and gammas[0] == 0 else "hybrid")
    grid = QuantGrid(res.levels[0], kind, g_star, bool(res.lo[0] == res.hi[0]))
    errors = [(float(g), float(e)) for g, e in zip(gammas, res.table[0])]
    return GammaSearchResult(g_star, errors, grid, fallback), res.idx[0]


def group_slices(cols: int, group_size: int) -> list[slice]:
    return [slice(c, min(c + group_size, cols)) for c in range(0, cols, group_size)]


def quantize_tensor_report(
    t: WeightTensor,
    cal: CalibrationSet | None,
    cfg: QuantConfig,
    scales=None,
) -> tuple[QuantizedTensor, QuantizeReport]:
    """Quantize ``t`` after multiplying column ``c`` by ``scales[c]``.

    The activation objective is evaluated on ``x / s`` so it measures the
    output error of the unscaled layer.  ``cal`` may be ``None`` or empty,
    in which case the weight-space fallback is used and flagged.
    """
    rows, cols = t.rows, t.cols
    if cal is not None and cal.cols != cols:
        raise ValueError(f"calibration has {cal.cols} columns, tensor {t.name!r} has {cols}")
    s = np.ones(cols, dtype=np.float32) if scales is None else np.asarray(scales, np.float32)
    if s.shape != (cols,):
        raise ValueError("scale vector length must equal cols")
    if not np.all(s > 0) or not np.all(np.isfinite(s)):
        raise ValueError("channel scales must be finite and positive")
    s64 = s.astype(np.float64)
    ws_all = t.data.astype(np.float64) * s64
    fallback = cal is None or cal.tokens == 0
    x_all = None if fallback else cal.data.astype(np.float64) / s64

    J = cfg.levels
    gammas = cfg.gamma_grid()
    slices = group_slices(cols, cfg.group_size)
    gpr = len(slices)
    params = np.zeros((rows, gpr), dtype=GROUP_DTYPE)
    idx_all = np.zeros((rows, cols), dtype=np.uint8)
    table = np.zeros((rows, gpr, len(gammas)))
    e_star = np.zeros((rows, gpr))
    for k, sl in enumerate(slices):
        if rows == 0:
            break
        res = _search_block(
            ws_all[:, sl],
            None if fallback else x_all[:, sl],
            J,
            gammas,
            inv_scale=1.0 / s64[sl],
        )
        p = params[:, k]
        p["mu"], p["sigma"], p["w_min"], p["w_max"] = res.mu, res.sigma, res.lo, res.hi
        p["gamma"] = res.gamma_star
        p["kind"] = KIND_CODES[cfg.mode]
        flags = np.where(res.lo == res.hi, FLAG_DEGENERATE, 0)
        if fallback:
            flags = flags | FLAG_WEIGHT_FALLBACK
        p["flags"] = flags
        params[:, k] = p
        idx_all[:, sl] = res.idx
        table[:, k] = res.table
        e_star[:, k] = res.e_star

    qt = QuantizedTensor(
        name=t.name,
        rows=rows,
        cols=cols,
        group_size=cfg.group_size,
        bits=cfg.bits,
        packed=pack_indices(idx_all, cfg.bits),
        group_params=params.ravel(),
        channel_scales=s,
    )
    report = QuantizeReport(
        gammas=gammas,
        gamma_star=params["gamma"].ravel().astype(np.float64),
        error_table=table.reshape(rows * gpr, len(gammas)),
        error_star=e_star.ravel(),
        degenerate=(params["flags"].ravel() & FLAG_DEGENERATE) > 0,
        weight_fallback=fallback,
    )
    return qt, report


def quantize_tensor(t, cal, cfg: QuantConfig, scales=None) -> QuantizedTensor:
    return quantize_tensor_report(t, cal, cfg, scales)[0]


def group_levels(qt: QuantizedTensor) -> np.ndarray:
    """Regenerate every group's levels, shape ``(rows, groups_per_row, J)``."""
    gp = qt.group_params.reshape(qt.rows, qt.groups_per_row)
    flat = gp.ravel()
    levels = grids.hybrid_levels_batch(
        flat["mu"].astype(np.float64),
        flat["sigma"].astype(np.float64),
        flat["w_min"].astype(np.float64),
        flat["w_max"].astype(np.float64),
        1 << qt.bits,
        flat["gamma"].astype(np.float64),
    )
    return levels.reshape(qt.rows, qt.groups_per_row, -1)


def dequantize_scaled(qt: QuantizedTensor) -> np.ndarray:
    """Reconstruction in the scaled domain (before dividing out the scales), float64."""
    validate_quantized(qt)
    idx = qt.indices().astype(np.int64)
    levels = group_levels(qt)
    out = np.empty((qt.rows, qt.cols))
    for k, sl in enumerate(group_slices(qt.cols, qt.group_size)):
        out[:, sl] = np.take_along_axis(levels[:, k, :], idx[:, sl], axis=1)
    return out


def dequantize(qt: QuantizedTensor) -> WeightTensor:
    recon = dequantize_scaled(qt) / qt.channel_scales.astype(np.float64)
    return WeightTensor(qt.name, recon.astype(np.float32))


# ---------------------------------------------------------------------------
# Companding oracle (tests only)
# ---------------------------------------------------------------------------


def companding_cell_centers(mu: float, sigma: float, J: int) -> np.ndarray:
    """Centres of ``J`` equal-probability cells mapped back through the logistic CDF."""
    theta = sigma * math.sqrt(3.0) / math.pi
    p = (np.arange(J) + 0.5) / J
    return sps.logistic.ppf(p, loc=mu, scale=theta)


def empirical_companding_oracle(w, J: int) -> np.ndarray:
    """Index of the CDF-domain cell each weight falls into.

    The weights are pushed through the logistic CDF fitted by their mean and
    (population) std, and the unit interval is cut into ``J`` equal cells.
    """
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.size > 4096:
        raise ValueError("oracle is meant for groups of at most 4096 values")
    sigma = w.std()
    if sigma == 0:
        return np.zeros(w.size, dtype=np.int64)
    theta = sigma * math.sqrt(3.0) / math.pi
    u = sps.logistic.cdf(w, loc=w.mean(), scale=theta)
    return np.clip(np.floor(u * J), 0, J - 1).astype(np.int64)
