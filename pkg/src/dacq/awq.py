"""Activation-aware per-input-channel scaling.

The mean absolute activation of each input channel, raised to a power
``alpha``, is used as a column scale before quantization.  ``alpha`` is picked
from ``{k/20 : k = 0..19}`` by minimising the full-layer output error of the
dequantized, unscaled weights on the calibration activations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quantizer import QuantConfig, QuantizeReport, dequantize, quantize_tensor_report
from .tensorio import CalibrationSet, QuantizedTensor, WeightTensor

ALPHA_GRID = np.arange(20, dtype=np.float64) / 20


@dataclass
class ChannelStats:
    s_vec: np.ndarray

    def __len__(self) -> int:
        return self.s_vec.size


@dataclass
class AlphaSearchResult:
    alpha_star: float
    losses: list[tuple[float, float]]
    scale_star: np.ndarray
    quantized: QuantizedTensor | None = field(default=None, repr=False)
    report: QuantizeReport | None = field(default=None, repr=False)

    @property
    def loss_star(self) -> float:
        return dict(self.losses)[self.alpha_star]


def channel_stats(cal: CalibrationSet) -> ChannelStats:
    if cal.tokens == 0:
        raise ValueError(f"calibration set {cal.layer_name!r} has no tokens")
    return ChannelStats(np.mean(np.abs(cal.data.astype(np.float64)), axis=0))


def scales_for_alpha(stats: ChannelStats, alpha: float) -> np.ndarray:
    """``S**alpha`` as float32; dead channels (``S == 0``) keep scale 1."""
    s = np.asarray(stats.s_vec, dtype=np.float64)
    out = np.ones_like(s)
    live = s > 0
    out[live] = s[live] ** alpha
    out = out.astype(np.float32)
    if not np.all(out > 0) or not np.all(np.isfinite(out)):
        raise ValueError(f"alpha={alpha} produces scales outside float32 range")
    return out


def apply_scale(t: WeightTensor, s) -> WeightTensor:
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (t.cols,):
        raise ValueError(f"scale length {s.size} != cols {t.cols}")
    if not np.all(s > 0):
        raise ValueError("scales must be positive")
    return WeightTensor(t.name, t.data.astype(np.float64) * s)


def remove_scale(t: WeightTensor, s) -> WeightTensor:
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (t.cols,) or not np.all(s > 0):
        raise ValueError("scales must be positive with length cols")
    return WeightTensor(t.name, t.data.astype(np.float64) / s)


def output_error(w: np.ndarray, w_hat: np.ndarray, a: np.ndarray) -> float:
    """``||w_hat @ a.T - w @ a.T||_F**2`` with activations ``a`` (tokens x cols)."""
    diff = np.asarray(w_hat, dtype=np.float64) - np.asarray(w, dtype=np.float64)
    out = diff @ np.asarray(a, dtype=np.float64).T
    return float(np.sum(out * out))


def quantize_with_scale(t, cal, cfg, s):
    qt, report = quantize_tensor_report(t, cal, cfg, s)
    loss = output_error(t.data, dequantize(qt).data, cal.data)
    return qt, report, loss


def alpha_search(
    t: WeightTensor,
    cal: CalibrationSet,
    stats: ChannelStats,
    cfg: QuantConfig,
    alphas=ALPHA_GRID,
) -> AlphaSearchResult:
    """Exhaustive search over ``alphas``; ties go to the smaller alpha."""
    if cal.cols != t.cols or len(stats) != t.cols:
        raise ValueError(f"shape mismatch between {t.name!r} and its calibration")
    losses = []
    best = None
    for alpha in alphas:
        s = scales_for_alpha(stats, float(alpha))
        qt, report, loss = quantize_with_scale(t, cal, cfg, s)
        losses.append((float(alpha), loss))
        if best is None or loss < best[0]:
            best = (loss, float(alpha), s, qt, report)
    _, a_star, s_star, qt, report = best
    return AlphaSearchResult(a_star, losses, s_star, qt, report)


def fixed_alpha(
    t: WeightTensor, cal: CalibrationSet, stats: ChannelStats, cfg: QuantConfig, alpha: float
) -> AlphaSearchResult:
    s = scales_for_alpha(stats, alpha)
    qt, report, loss = quantize_with_scale(t, cal, cfg, s)
    return AlphaSearchResult(float(alpha), [(float(alpha), loss)], s, qt, report)


def salience_report(t: WeightTensor, stats: ChannelStats) -> dict:
    """Column with the largest mean |weight| vs the one with the largest activation."""
    w_col = int(np.argmax(np.mean(np.abs(t.data.astype(np.float64)), axis=0)))
    a_col = int(np.argmax(stats.s_vec))
    return {
        "tensor_name": t.name,
        "weight_argmax": w_col,
        "activation_argmax": a_col,
        "coincide": w_col == a_col,
    }
