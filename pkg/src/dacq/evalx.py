"""Reconstruction and activation-error evaluation across quantization arms."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import awq
from .quantizer import (
    QuantConfig,
    QuantizedTensor,
    assign_nearest,
    dequantize,
    dequantize_scaled,
    group_errors,
    group_slices,
    quantize_tensor_report,
)
from .tensorio import (
    FLAG_WEIGHT_FALLBACK,
    CalibrationSet,
    WeightTensor,
    load_calibration,
    load_tensor,
)

log = logging.getLogger(__name__)


@dataclass
class EvalRecord:
    tensor_name: str
    mode: str
    mse: float
    mae: float
    activation_error: float
    gamma_histogram: list[int]
    alpha_star: float
    alpha_policy: str = "searched"  # or "fixed"
    output_error: float = float("nan")
    weight_fallback: bool = False

    def __post_init__(self):
        if min(self.mse, self.mae, self.activation_error) < 0:
            raise ValueError("error metrics must be non-negative")

    def row(self) -> dict:
        d = asdict(self)
        d["gamma_histogram"] = " ".join(str(c) for c in self.gamma_histogram)
        return d


CSV_COLUMNS = [f.name for f in EvalRecord.__dataclass_fields__.values()]


@dataclass(frozen=True)
class Arm:
    """One comparison arm: a grid mode plus whether alpha is searched."""

    label: str
    mode: str
    alpha_search: bool = True


DEFAULT_ARMS = (
    Arm("awq-uniform", "uniform"),
    Arm("dacq-logistic", "logistic"),
    Arm("dacq-hybrid", "hybrid"),
)
ARMS_BY_LABEL = {a.label: a for a in DEFAULT_ARMS}


def reconstruction_metrics(orig: WeightTensor, recon: WeightTensor) -> tuple[float, float]:
    a = np.asarray(getattr(orig, "data", orig), dtype=np.float64)
    b = np.asarray(getattr(recon, "data", recon), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d)), float(np.mean(np.abs(d)))


def group_activation_error(
    qt: QuantizedTensor, orig: WeightTensor, cal: CalibrationSet | None
) -> float:
    """Sum of per-group output errors, recomputed from a stored artifact.

    Uses the same scaled-domain objective as the quantizer, so for an
    artifact produced with the same calibration it reproduces the search's
    total exactly.
    """
    if (orig.rows, orig.cols) != (qt.rows, qt.cols):
        raise ValueError(f"artifact {qt.name!r} does not match original shape")
    s = qt.channel_scales.astype(np.float64)
    ws = orig.data.astype(np.float64) * s
    w_hat = dequantize_scaled(qt)
    fallback = cal is None or cal.tokens == 0
    x = None if fallback else cal.data.astype(np.float64) / s
    total = np.zeros((qt.rows, qt.groups_per_row))
    for k, sl in enumerate(group_slices(qt.cols, qt.group_size)):
        total[:, k] = group_errors(
            ws[:, sl] - w_hat[:, sl], None if fallback else x[:, sl], 1.0 / s[sl]
        )
    return float(np.sum(total.ravel()))


def gamma_histogram(qt: QuantizedTensor) -> list[int]:
    k = np.rint(qt.group_params["gamma"].astype(np.float64) * 20).astype(int)
    return np.bincount(k, minlength=21).tolist()


def record_from_artifact(
    qt: QuantizedTensor,
    orig: WeightTensor,
    cal: CalibrationSet | None,
    mode: str,
    alpha_star: float = float("nan"),
    alpha_policy: str = "searched",
) -> EvalRecord:
    recon = dequantize(qt)
    mse, mae = reconstruction_metrics(orig, recon)
    has_cal = cal is not None and cal.tokens > 0
    return EvalRecord(
        tensor_name=orig.name,
        mode=mode,
        mse=mse,
        mae=mae,
        activation_error=group_activation_error(qt, orig, cal),
        gamma_histogram=gamma_histogram(qt),
        alpha_star=alpha_star,
        alpha_policy=alpha_policy,
        output_error=awq.output_error(orig.data, recon.data, cal.data) if has_cal else float("nan"),
        weight_fallback=bool(np.any(qt.group_params["flags"] & FLAG_WEIGHT_FALLBACK)),
    )


def run_arm(t, cal, arm: Arm, bits=4, group_size=128, alpha=None):
    """Quantize ``t`` for one arm; returns ``(QuantizedTensor, alpha, policy, report)``.

    ``alpha`` pins the scaling exponent instead of searching it.
    """
    cfg = QuantConfig(bits, group_size, arm.mode)
    if cal is None or cal.tokens == 0:
        qt, report = quantize_tensor_report(t, None, cfg)
        return qt, 0.0, "none", report
    stats = awq.channel_stats(cal)
    if alpha is not None:
        res = awq.fixed_alpha(t, cal, stats, cfg, alpha)
        return res.quantized, res.alpha_star, "fixed", res.report
    if arm.alpha_search:
        res = awq.alpha_search(t, cal, stats, cfg)
        return res.quantized, res.alpha_star, "searched", res.report
    res = awq.fixed_alpha(t, cal, stats, cfg, 0.0)
    return res.quantized, 0.0, "fixed", res.report


def evaluate_tensor(
    t: WeightTensor,
    cal: CalibrationSet | None,
    arms=DEFAULT_ARMS,
    bits: int = 4,
    group_size: int = 128,
    fixed_alpha_ablation: bool = True,
) -> list[EvalRecord]:
    """Searched-alpha rows for every arm, then a fixed-alpha ablation.

    The ablation pins every arm to the first arm's alpha*, so the arms differ
    only in their grids.
    """
    records = []
    searched = {}
    for arm in arms:
        qt, alpha, policy, _ = run_arm(t, cal, arm, bits, group_size)
        searched[arm.label] = alpha
        records.append(record_from_artifact(qt, t, cal, arm.label, alpha, policy))
    has_cal = cal is not None and cal.tokens > 0
    if fixed_alpha_ablation and has_cal and arms:
        pinned = searched[arms[0].label]
        for arm in arms:
            qt, alpha, policy, _ = run_arm(t, cal, arm, bits, group_size, alpha=pinned)
            records.append(record_from_artifact(qt, t, cal, arm.label, alpha, policy))
    return records


def layer_error_profile(
    model_dir,
    cfgs=DEFAULT_ARMS,
    calib_dir=None,
    bits: int = 4,
    group_size: int = 128,
) -> list[EvalRecord]:
    """Per-tensor error profile over a directory of ``.dacqt`` weight files.

    Calibration files are name-matched in ``calib_dir`` (default: the
    ``calib`` subdirectory of ``model_dir``).  Tensors without calibration
    fall back to the weight-space objective and are flagged.
    """
    model_dir = Path(model_dir)
    calib_dir = Path(calib_dir) if calib_dir else model_dir / "calib"
    records = []
    for path in sorted(model_dir.glob("*.dacqt")):
        t = load_tensor(path)
        cpath = calib_dir / path.name
        cal = load_calibration(cpath) if cpath.exists() else None
        if cal is None:
            log.warning("no calibration for %s, using weight-space objective", t.name)
        records.extend(evaluate_tensor(t, cal, tuple(cfgs), bits, group_size))
    return records


def write_records(records: list[EvalRecord], path, fmt: str = "csv") -> None:
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps([asdict(r) for r in records], indent=2) + "\n")
        return
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in records:
            writer.writerow(r.row())


# ---------------------------------------------------------------------------
# Lloyd-Max reference quantizer (tests only)
# ---------------------------------------------------------------------------


@dataclass
class LloydMaxResult:
    levels: np.ndarray
    mse: float
    iterations: int
    converged: bool = True
    history: list[float] = field(default_factory=list, repr=False)


def bruteforce_grid_oracle(w, J: int, max_iter: int = 1000) -> LloydMaxResult:
    """Locally MSE-optimal levels by Lloyd-Max iteration from the uniform grid.

    Only for small problems (at most 512 values, 8 levels).  Empty cells keep
    their previous level.  Without convergence the best iterate is returned
    with ``converged=False``.
    """
    w = np.sort(np.asarray(w, dtype=np.float64).ravel())
    if w.size == 0 or w.size > 512:
        raise ValueError("oracle accepts between 1 and 512 values")
    if not 2 <= J <= 8:
        raise ValueError("oracle accepts 2 <= J <= 8")
    levels = w[0] + np.arange(J) * ((w[-1] - w[0]) / (J - 1))
    levels[-1] = w[-1]

    def mse_of(lv):
        return float(np.mean((w - lv[assign_nearest(w, lv)]) ** 2))

    best = (mse_of(levels), levels.copy())
    history = [best[0]]
    for it in range(1, max_iter + 1):
        idx = assign_nearest(w, levels)
        sums = np.bincount(idx, weights=w, minlength=J)
        counts = np.bincount(idx, minlength=J)
        new = np.where(counts > 0, sums / np.maximum(counts, 1), levels)
        new = np.sort(new)
        err = mse_of(new)
        history.append(err)
        if err < best[0]:
            best = (err, new.copy())
        if np.array_equal(new, levels):
            return LloydMaxResult(best[1], best[0], it, True, history)
        levels = new
    return LloydMaxResult(best[1], best[0], max_iter, False, history)
