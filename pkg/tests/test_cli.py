import csv
import json

import numpy as np
import pytest

from dacq import synth
from dacq.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from dacq.tensorio import load_calibration, load_quantized, save_calibration, save_tensor


@pytest.fixture
def model(tmp_path):
    """Two small mixture layers with name-matched calibration."""
    wdir, cdir = tmp_path / "w", tmp_path / "c"
    wdir.mkdir(), cdir.mkdir()
    for i in range(2):
        t = synth.logistic_mixture_tensor(f"l{i}", 8, 64, seed=i)
        save_tensor(t, wdir / f"l{i}.dacqt")
        save_calibration(synth.gaussian_calibration(f"l{i}", 32, 64, 100 + i, [5]), cdir / f"l{i}.dacqt")
    return wdir, cdir, tmp_path / "out"


def run(*args):
    return main([str(a) for a in args])


def test_fit_tally_one_per_family(tmp_path):
    wdir = tmp_path / "w"
    wdir.mkdir()
    for i, fam in enumerate(("normal", "laplace", "logistic")):
        save_tensor(synth.family_tensor(fam, fam, 100, 1000, seed=i), wdir / f"{fam}.dacqt")
    out = tmp_path / "out"
    assert run("fit", "--in", wdir, "--out", out) == EXIT_OK
    summary = json.loads((out / "fit_summary.json").read_text())
    assert summary["best_fit_counts"] == {"normal": 1, "laplace": 1, "logistic": 1}
    assert summary["best_fit"] == {"laplace": "laplace", "logistic": "logistic", "normal": "normal"}
    report = json.loads((out / "logistic.fit.json").read_text())
    assert report["n_samples"] == 100_000
    assert {f["family"] for f in report["fits"]} == {"normal", "laplace", "logistic"}
    with (out / "normal.qq.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1001


def test_fit_empty_dir(tmp_path):
    (tmp_path / "w").mkdir()
    assert run("fit", "--in", tmp_path / "w", "--out", tmp_path / "o") == EXIT_OK
    summary = json.loads((tmp_path / "o" / "fit_summary.json").read_text())
    assert summary["best_fit"] == {} and summary["errors"] == {}


def test_fit_corrupt_file_recorded(tmp_path):
    wdir = tmp_path / "w"
    wdir.mkdir()
    save_tensor(synth.family_tensor("ok", "normal", 10, 100, 0), wdir / "ok.dacqt")
    (wdir / "bad.dacqt").write_bytes(b"DACQT\x01\x00\x02garbage")
    assert run("fit", "--in", wdir, "--out", tmp_path / "o", "--sample-n", 500) == EXIT_OK
    summary = json.loads((tmp_path / "o" / "fit_summary.json").read_text())
    assert list(summary["errors"]) == ["bad.dacqt"]
    assert list(summary["best_fit"]) == ["ok"]


def test_qq_export_columns(tmp_path):
    wdir = tmp_path / "w"
    wdir.mkdir()
    save_tensor(synth.family_tensor("t", "logistic", 10, 100, 0), wdir / "t.dacqt")
    assert run("qq-export", "--in", wdir, "--out", tmp_path / "o", "--probe-m", 50) == EXIT_OK
    with (tmp_path / "o" / "t.qq.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["p", "q_theoretical_normal", "q_theoretical_laplace",
                             "q_theoretical_logistic", "q_empirical"]
    assert len(rows) == 50 and float(rows[0]["p"]) == 0.01


def test_quantize_deterministic(model):
    wdir, cdir, out = model
    args = ("quantize", "--in", wdir, "--calib", cdir, "--group-size", 16, "--mode", "hybrid",
            "--alpha-search")
    assert run(*args, "--out", out / "a") == EXIT_OK
    assert run(*args, "--out", out / "b") == EXIT_OK
    for name in ("l0.dacqq", "l1.dacqq"):
        assert (out / "a/hybrid" / name).read_bytes() == (out / "b/hybrid" / name).read_bytes()
    manifest = json.loads((out / "a/hybrid/manifest.json").read_text())
    entry = manifest["tensors"]["l0"]
    assert len(entry["alpha_losses"]) == 20 and entry["alpha_star"] is not None
    assert sum(entry["gamma_histogram"]) == load_quantized(out / "a/hybrid/l0.dacqq").n_groups
    assert entry["seconds"] >= 0


def test_quantize_alpha_search_without_calibration(model):
    wdir, _, out = model
    assert run("quantize", "--in", wdir, "--out", out, "--alpha-search") == EXIT_DATA


def test_quantize_hybrid_without_calibration_warns(model, caplog):
    wdir, _, out = model
    assert run("quantize", "--in", wdir, "--out", out, "--group-size", 16) == EXIT_OK
    assert "weight-space" in caplog.text
    qt = load_quantized(out / "hybrid" / "l0.dacqq")
    assert np.all(qt.group_params["flags"] & 0x02)


def test_quantize_large_group_warns(model, caplog):
    wdir, cdir, out = model
    assert run("quantize", "--in", wdir, "--calib", cdir, "--out", out,
               "--group-size", 1000, "--mode", "uniform") == EXIT_OK
    assert "exceeds" in caplog.text
    assert load_quantized(out / "uniform" / "l0.dacqq").groups_per_row == 1


def test_eval_consistent_with_manifest(model):
    wdir, cdir, out = model
    common = ("--in", wdir, "--calib", cdir, "--out", out, "--group-size", 16)
    assert run("quantize", *common, "--mode", "uniform,logistic,hybrid") == EXIT_OK
    assert run("eval", *common, "--mode", "uniform,logistic,hybrid") == EXIT_OK
    with (out / "eval.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6
    for name in ("l0", "l1"):
        assert sorted(r["mode"] for r in rows if r["tensor_name"] == name) == [
            "awq-uniform", "dacq-hybrid", "dacq-logistic"]
    for r in rows:
        mode = r["mode"].split("-")[1]
        logged = json.loads((out / mode / "manifest.json").read_text())["tensors"][r["tensor_name"]]
        assert abs(float(r["mse"]) - logged["mse"]) <= 1e-9
        assert float(r["activation_error"]) == pytest.approx(logged["activation_error"], rel=1e-12)


def test_eval_absent_mode(model):
    wdir, cdir, out = model
    assert run("quantize", "--in", wdir, "--out", out, "--mode", "uniform") == EXIT_OK
    assert run("eval", "--in", wdir, "--out", out, "--mode", "uniform,logistic") == EXIT_DATA
    missing = json.loads((out / "eval_missing.json").read_text())["missing"]
    assert missing == ["logistic/l0", "logistic/l1"]


def test_eval_json(model):
    wdir, cdir, out = model
    assert run("quantize", "--in", wdir, "--out", out, "--mode", "logistic") == EXIT_OK
    assert run("eval", "--in", wdir, "--out", out, "--mode", "logistic", "--format", "json") == 0
    assert len(json.loads((out / "eval.json").read_text())) == 2


def test_profile(model):
    wdir, cdir, out = model
    assert run("profile", "--in", wdir, "--calib", cdir, "--out", out, "--group-size", 16,
               "--mode", "uniform,hybrid") == EXIT_OK
    with (out / "profile.csv").open() as fh:
        assert len(list(csv.DictReader(fh))) == 8


def test_gen_calib(model, tmp_path):
    wdir, _, _ = model
    out = tmp_path / "gc"
    assert run("gen-calib", "--in", wdir, "--out", out, "--tokens", 10, "--salient", "3") == EXIT_OK
    cal = load_calibration(out / "l0.dacqt")
    assert cal.data.shape == (10, 64)
    assert np.mean(np.abs(cal.data[:, 3])) > 10 * np.mean(np.abs(cal.data[:, 4]))
    assert run("gen-calib", "--in", wdir, "--out", out, "--salient", "64") == EXIT_CONFIG


def test_gen_weights(tmp_path):
    assert run("gen-weights", "--out", tmp_path, "--layers", 2, "--rows", 4, "--cols", 8) == 0
    assert sorted(p.name for p in tmp_path.glob("*.dacqt")) == ["layer00.dacqt", "layer01.dacqt"]


def test_config_file_flags_win(model, tmp_path):
    wdir, cdir, out = model
    conf = tmp_path / "conf.json"
    conf.write_text(json.dumps({"in": str(wdir), "out": str(out), "mode": "logistic",
                                "group_size": 32, "bits": 3}))
    assert run("quantize", "--config", conf, "--bits", 2) == EXIT_OK
    qt = load_quantized(out / "logistic" / "l0.dacqq")
    assert (qt.bits, qt.group_size) == (2, 32)


@pytest.mark.parametrize(
    "extra",
    [("--bits", 5), ("--mode", "nonuniform"), ("--group-size", 0), ("--workers", 0)],
)
def test_config_errors(model, extra):
    wdir, _, out = model
    assert run("quantize", "--in", wdir, "--out", out, *extra) == EXIT_CONFIG


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"colour": 1}')
    assert run("fit", "--config", bad) == EXIT_CONFIG
    assert run("fit", "--config", tmp_path / "nope.json") == EXIT_CONFIG
    assert run("fit", "--out", tmp_path) == EXIT_CONFIG


def test_missing_input_dir(tmp_path):
    assert run("fit", "--in", tmp_path / "nope", "--out", tmp_path / "o") == EXIT_DATA


def test_workers_same_result(model):
    wdir, cdir, out = model
    common = ("quantize", "--in", wdir, "--calib", cdir, "--group-size", 16)
    assert run(*common, "--out", out / "a") == EXIT_OK
    assert run(*common, "--out", out / "b", "--workers", 2) == EXIT_OK
    assert (out / "a/hybrid/l1.dacqq").read_bytes() == (out / "b/hybrid/l1.dacqq").read_bytes()
