"""``dacq`` command-line entry point.

Subcommands::

    fit         best-fit reference family per tensor, plus Q-Q CSVs and a tally
    qq-export   Q-Q CSVs only
    quantize    write quantized artifacts and a manifest per mode
    eval        compare stored artifacts against the originals
    profile     quantize every arm in memory and emit a layer-wise error table
    gen-calib   seeded Gaussian calibration activations matching a weight dir
    gen-weights seeded synthetic weight tensors

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import awq, distfit, evalx, synth
from .quantizer import MODES, QuantConfig, dequantize, quantize_tensor_report
from .tensorio import (
    SUPPORTED_BITS,
    CalibrationSet,
    FormatError,
    WeightTensor,
    iter_safetensors,
    load_calibration,
    load_quantized,
    load_tensor,
    save_calibration,
    save_quantized,
    save_tensor,
)

log = logging.getLogger("dacq")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3

MODE_LABELS = {"uniform": "awq-uniform", "logistic": "dacq-logistic", "hybrid": "dacq-hybrid"}


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    bits: int = 4
    group_size: int = 128
    mode: str = "hybrid"
    alpha_search: bool = False
    seed: int = 0
    sample_n: int = 1_000_000
    probe_m: int = 1000
    inp: str | None = None
    calib: str | None = None
    out: str | None = None
    format: str = "csv"
    workers: int = 1

    def validate(self) -> None:
        if self.bits not in SUPPORTED_BITS:
            raise ConfigError(f"--bits must be one of {SUPPORTED_BITS}")
        if self.group_size < 1:
            raise ConfigError("--group-size must be >= 1")
        modes = self.mode.split(",")
        if not modes or any(m not in MODES for m in modes):
            raise ConfigError(f"--mode must be from {MODES}")
        if self.sample_n < 2 or self.probe_m < 2:
            raise ConfigError("--sample-n and --probe-m must be >= 2")
        if self.format not in ("csv", "json"):
            raise ConfigError("--format must be csv or json")
        if self.workers < 1:
            raise ConfigError("--workers must be >= 1")


# ---------------------------------------------------------------------------
# Input discovery
# ---------------------------------------------------------------------------


def discover(in_dir) -> tuple[list[WeightTensor], dict[str, str]]:
    """Load every tensor under ``in_dir``; unreadable files are reported, not raised."""
    tensors, errors = [], {}
    root = Path(in_dir)
    if not root.is_dir():
        raise DataError(f"input directory {root} does not exist")
    for path in sorted(root.iterdir()):
        try:
            if path.suffix == ".dacqt":
                tensors.append(load_tensor(path))
            elif path.suffix == ".safetensors":
                tensors.extend(iter_safetensors(path))
        except (FormatError, OSError, KeyError, ValueError) as exc:
            errors[path.name] = str(exc)
            log.error("skipping %s: %s", path.name, exc)
    return tensors, errors


def find_calibration(cfg: RunConfig, name: str) -> CalibrationSet | None:
    if not cfg.calib:
        return None
    path = Path(cfg.calib) / f"{name}.dacqt"
    return load_calibration(path) if path.exists() else None


def _map(cfg: RunConfig, fn, items):
    if cfg.workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(fn, items))


def _out_dir(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise ConfigError("--out is required")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_in(cfg: RunConfig) -> None:
    if not cfg.inp:
        raise ConfigError("--in is required")


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_qq(path: Path, table: np.ndarray) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p", "q_theoretical_normal", "q_theoretical_laplace",
                    "q_theoretical_logistic", "q_empirical"])
        for row in table:
            w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_fit(cfg: RunConfig) -> dict:
    _require_in(cfg)
    out = _out_dir(cfg)
    tensors, errors = discover(cfg.inp)

    def one(t: WeightTensor):
        try:
            x = distfit.sample_weights(t, cfg.sample_n, cfg.seed)
            s = distfit.standardize(x)
        except ValueError as exc:
            return t.name, None, str(exc)
        report = distfit.fit_sample(t.name, x, cfg.probe_m)
        _dump(out / f"{t.name}.fit.json", report.to_dict())
        _write_qq(out / f"{t.name}.qq.csv", distfit.qq_table(s, cfg.probe_m))
        return t.name, report, None

    reports = []
    for name, report, err in _map(cfg, one, tensors):
        if err:
            errors[name] = err
        else:
            reports.append(report)
    summary = distfit.summarize_models(reports)
    summary["best_fit"] = {r.tensor_name: r.best_family for r in reports}
    summary["errors"] = errors
    _dump(out / "fit_summary.json", summary)
    counts = summary["best_fit_counts"]
    print(" ".join(f"{k}:{v}/{len(reports)}" for k, v in counts.items()))
    return summary


def cmd_qq_export(cfg: RunConfig) -> dict:
    _require_in(cfg)
    out = _out_dir(cfg)
    tensors, errors = discover(cfg.inp)
    for t in tensors:
        try:
            x = distfit.sample_weights(t, cfg.sample_n, cfg.seed)
            _write_qq(out / f"{t.name}.qq.csv", distfit.qq_table(x, cfg.probe_m))
        except ValueError as exc:
            errors[t.name] = str(exc)
    return {"exported": [t.name for t in tensors if t.name not in errors], "errors": errors}


def _quantize_one(cfg: RunConfig, mode: str, t: WeightTensor) -> dict:
    qcfg = QuantConfig(cfg.bits, cfg.group_size, mode)
    cal = find_calibration(cfg, t.name)
    if cal is not None and cal.cols != t.cols:
        raise DataError(f"calibration for {t.name} has {cal.cols} columns, expected {t.cols}")
    if t.cols and cfg.group_size > t.cols:
        log.warning("%s: group size %d exceeds %d columns, one group per row",
                    t.name, cfg.group_size, t.cols)
    start = time.perf_counter()
    entry: dict = {}
    if cfg.alpha_search:
        if cal is None or cal.tokens == 0:
            raise DataError(f"--alpha-search needs calibration for {t.name}")
        res = awq.alpha_search(t, cal, awq.channel_stats(cal), qcfg)
        qt, report = res.quantized, res.report
        entry["alpha_star"] = res.alpha_star
        entry["alpha_losses"] = [[a, l] for a, l in res.losses]
    else:
        if cal is None and mode == "hybrid":
            log.warning("%s: no calibration, gamma chosen by weight-space MSE", t.name)
        qt, report = quantize_tensor_report(t, cal, qcfg)
        entry["alpha_star"] = None
    mse, mae = evalx.reconstruction_metrics(t, dequantize(qt))
    entry.update(
        gamma_histogram=report.gamma_histogram(),
        activation_error=report.total_error,
        weight_fallback=report.weight_fallback,
        mse=mse,
        mae=mae,
        seconds=time.perf_counter() - start,
    )
    return {"name": t.name, "qt": qt, "entry": entry}


def cmd_quantize(cfg: RunConfig) -> dict:
    _require_in(cfg)
    out = _out_dir(cfg)
    tensors, errors = discover(cfg.inp)
    if errors:
        raise DataError(f"unreadable inputs: {sorted(errors)}")
    manifests = {}
    for mode in cfg.mode.split(","):
        mode_dir = out / mode
        mode_dir.mkdir(exist_ok=True)
        results = _map(cfg, lambda t: _quantize_one(cfg, mode, t), tensors)
        for r in results:
            save_quantized(r["qt"], mode_dir / f"{r['name']}.dacqq")
        manifest = {
            "config": {"bits": cfg.bits, "group_size": cfg.group_size, "mode": mode,
                       "alpha_search": cfg.alpha_search, "seed": cfg.seed},
            "tensors": {r["name"]: r["entry"] for r in results},
        }
        _dump(mode_dir / "manifest.json", manifest)
        manifests[mode] = manifest
    return manifests


def cmd_eval(cfg: RunConfig) -> dict:
    _require_in(cfg)
    out = _out_dir(cfg)
    tensors, errors = discover(cfg.inp)
    records, missing = [], []
    for mode in cfg.mode.split(","):
        mode_dir = out / mode
        manifest_path = mode_dir / "manifest.json"
        manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
        logged = manifest.get("tensors", {})
        for t in tensors:
            path = mode_dir / f"{t.name}.dacqq"
            if not path.exists():
                missing.append(f"{mode}/{t.name}")
                continue
            qt = load_quantized(path)
            if (qt.rows, qt.cols) != (t.rows, t.cols):
                raise DataError(f"{path} does not match original {t.name} shape")
            alpha = (logged.get(t.name) or {}).get("alpha_star")
            rec = evalx.record_from_artifact(
                qt, t, find_calibration(cfg, t.name), MODE_LABELS[mode],
                float("nan") if alpha is None else alpha,
                "searched" if alpha is not None else "none",
            )
            records.append(rec)
    report_path = out / f"eval.{cfg.format}"
    evalx.write_records(records, report_path, cfg.format)
    result = {"records": len(records), "missing": missing, "errors": errors, "report": str(report_path)}
    if missing:
        _dump(out / "eval_missing.json", result)
        raise DataError(f"missing artifacts: {', '.join(missing)}")
    return result


def cmd_profile(cfg: RunConfig) -> dict:
    _require_in(cfg)
    out = _out_dir(cfg)
    arms = [evalx.ARMS_BY_LABEL[MODE_LABELS[m]] for m in cfg.mode.split(",")]
    records = evalx.layer_error_profile(cfg.inp, arms, cfg.calib, cfg.bits, cfg.group_size)
    path = out / f"profile.{cfg.format}"
    evalx.write_records(records, path, cfg.format)
    return {"records": len(records), "report": str(path)}


def cmd_gen_calib(cfg: RunConfig, tokens: int, salient: list[int], factor: float) -> dict:
    _require_in(cfg)
    out = _out_dir(cfg)
    tensors, errors = discover(cfg.inp)
    written = []
    for i, t in enumerate(tensors):
        bad = [c for c in salient if not 0 <= c < t.cols]
        if bad:
            raise ConfigError(f"salient channels {bad} out of range for {t.name}")
        cal = synth.gaussian_calibration(t.name, tokens, t.cols, cfg.seed + i, salient, factor)
        save_calibration(cal, out / f"{t.name}.dacqt")
        written.append(t.name)
    return {"written": written, "errors": errors}


def cmd_gen_weights(cfg: RunConfig, family: str, layers: int, rows: int, cols: int) -> dict:
    out = _out_dir(cfg)
    written = []
    for i in range(layers):
        name = f"layer{i:02d}"
        if family == "mixture":
            t = synth.logistic_mixture_tensor(name, rows, cols, cfg.seed + i)
        else:
            t = synth.family_tensor(name, family, rows, cols, cfg.seed + i)
        save_tensor(t, out / f"{name}.dacqt")
        written.append(name)
    return {"written": written}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    # defaults are None so a config file can fill in anything not given on the command line
    p.add_argument("--bits", type=int)
    p.add_argument("--group-size", type=int)
    p.add_argument("--mode", help="uniform, logistic, hybrid (comma list for quantize/eval)")
    p.add_argument("--alpha-search", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--sample-n", type=int)
    p.add_argument("--probe-m", type=int)
    p.add_argument("--in", dest="inp")
    p.add_argument("--calib")
    p.add_argument("--out")
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--workers", type=int)
    p.add_argument("--config", help="JSON file of defaults; explicit flags win")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dacq", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("fit", "qq-export", "quantize", "eval", "profile"):
        _common(sub.add_parser(name))
    p = sub.add_parser("gen-calib")
    _common(p)
    p.add_argument("--tokens", type=int, default=256)
    p.add_argument("--salient", default="", help="comma-separated channel indices")
    p.add_argument("--salient-factor", type=float, default=100.0)
    p = sub.add_parser("gen-weights")
    _common(p)
    p.add_argument("--family", choices=("normal", "laplace", "logistic", "mixture"),
                   default="mixture")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--rows", type=int, default=512)
    p.add_argument("--cols", type=int, default=512)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if args.config:
        try:
            values.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
    known = {f.name for f in fields(RunConfig)}
    aliases = {"in": "inp", "group-size": "group_size", "alpha-search": "alpha_search",
               "sample-n": "sample_n", "probe-m": "probe_m"}
    values = {aliases.get(k, k): v for k, v in values.items()}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in known:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        if args.command == "fit":
            result = cmd_fit(cfg)
        elif args.command == "qq-export":
            result = cmd_qq_export(cfg)
        elif args.command == "quantize":
            result = {m: sorted(v["tensors"]) for m, v in cmd_quantize(cfg).items()}
        elif args.command == "eval":
            result = cmd_eval(cfg)
        elif args.command == "profile":
            result = cmd_profile(cfg)
        elif args.command == "gen-calib":
            salient = [int(c) for c in args.salient.split(",") if c.strip()]
            result = cmd_gen_calib(cfg, args.tokens, salient, args.salient_factor)
        else:
            result = cmd_gen_weights(cfg, args.family, args.layers, args.rows, args.cols)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if args.verbose:
        print(json.dumps(result, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
