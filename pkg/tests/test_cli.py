import csv
import hashlib
import io
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from surecvlab.cli import run

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def call(*argv):
    buf = io.StringIO()
    code = run(list(argv), stdout=buf)
    return code, buf.getvalue()


def table(text):
    return list(csv.DictReader(io.StringIO(text)))


# --- prox-eval ---------------------------------------------------------------------------


def test_prox_eval_zero_grid_gives_zero_displacement():
    code, out = call("prox-eval", "--set", "theta=1, -2", "--set", "lambdas=0")
    assert code == 0
    rows = table(out)
    assert len(rows) == 1 and float(rows[0]["g_1"]) == 0.0 and float(rows[0]["g_2"]) == 0.0


def test_prox_eval_lasso_preset_shows_four_patterns():
    code, out = call("prox-eval", "--set", "preset=figure2-lasso")
    assert code == 0
    assert len({r["eta"] for r in table(out)}) == 4


def test_unknown_key_named(capsys):
    code, _ = call("prox-eval", "--set", "theta=1", "--set", "thetta=2")
    assert code == 2
    assert "thetta" in capsys.readouterr().err


def test_malformed_config_file(tmp_path, capsys):
    p = tmp_path / "x.conf"
    p.write_text("theta 1\n")
    assert call("prox-eval", "--config", str(p))[0] == 2


# --- sure-landscape / sure-min ------------------------------------------------------------------


def test_landscape_figure_ridge_two_minima_and_check():
    code, out = call("sure-landscape", "--set", "preset=figure2-ridge", "--check")
    assert code == 0
    minima = [r for r in table(out) if r["point"] == "minimum"]
    assert len(minima) == 2
    assert sum(int(r["global_min"]) for r in minima) == 1
    for r in table(out):
        assert float(r["sure_figure"]) == pytest.approx(float(r["sure"]) + 2, abs=1e-12)


def test_landscape_figure_lasso_two_global_minima():
    code, out = call("sure-landscape", "--set", "preset=figure2-lasso", "--check")
    assert code == 0
    glob = [r for r in table(out) if r["global_min"] == "1"]
    assert len(glob) == 2
    for r in glob:
        assert float(r["sure"]) == pytest.approx(1.375, abs=1e-9)
        assert float(r["sure_figure"]) == pytest.approx(4.375, abs=1e-9)


def test_landscape_scalar_ridge_unimodal():
    code, out = call("sure-landscape", "--set", "theta=3", "--set", "lambdas=0 + logspace(0.001, 100, 400)")
    assert code == 0
    rows = table(out)
    assert len([r for r in rows if r["point"] == "minimum"]) == 1
    v = np.array([float(r["sure"]) for r in rows if r["point"] == "grid"])
    d = np.sign(np.diff(v))
    assert np.count_nonzero(np.diff(d[d != 0]) != 0) == 1


def test_landscape_empty_grid_is_config_error():
    assert call("sure-landscape", "--set", "theta=1", "--set", "lambdas=")[0] == 2


def test_check_without_reference_preset_is_config_error():
    assert call("sure-landscape", "--set", "theta=1", "--check")[0] == 2


def test_check_mismatch_exits_4():
    code, _ = call("sure-landscape", "--set", "preset=figure2-ridge", "--set", "theta=1.3893, 3", "--check")
    assert code == 4


def test_sure_min_saturation_columns():
    code, out = call("sure-min", "--set", "theta=0")
    assert code == 0
    row = table(out)[0]
    assert row["saturated"] == "1" and float(row["lambda_star"]) == 1e6


# --- data-driven commands ---------------------------------------------------------------------


def test_cv_curve_and_tune_agree():
    base = ["--set", "theta0=1, 0.5", "--set", "n=60", "--set", "lambdas=logspace(0.1, 10, 5)"]
    code, out = call("cv-curve", *base)
    assert code == 0
    rows = table(out)
    cv = np.array([float(r["cv"]) for r in rows])
    lam = float(rows[int(np.argmin(cv))]["lambda"])
    code, out = call("tune", *base)
    assert code == 0 and float(table(out)[0]["lambda_star"]) == lam


def test_n_not_above_k_rejected(capsys):
    assert call("cv-curve", "--set", "theta0=1, 0.5", "--set", "n=2")[0] == 2
    assert "n > k" in capsys.readouterr().err


def test_convergence_study_validation():
    assert call("convergence-study", "--set", "theta0=1, 0.5", "--set", "replications=0")[0] == 2
    assert call("convergence-study", "--set", "theta0=1, 0.5", "--set", "sample_sizes=2")[0] == 2


def test_convergence_study_small_run():
    code, out = call("convergence-study", "--set", "theta0=1, 0.5", "--set", "sample_sizes=50, 100",
                     "--set", "replications=3", "--set", "lambdas=logspace(0.1, 10, 4)")
    assert code == 0
    rows = table(out)
    assert len(rows) == 6
    assert set(rows[0]) == {"n", "replication", "raw_gap", "centered_gap", "argmin_cv", "argmin_sure",
                            "lambda_star_agrees"}


def test_shipped_convergence_config_parses():
    code, out = call("convergence-study", "--config", str(CONFIGS / "convergence.conf"),
                     "--set", "replications=2")
    assert code == 0 and {r["n"] for r in table(out)} == {"200", "800"}


# --- risk curves ----------------------------------------------------------------------------------


def test_risk_curve_one_point_one_row_per_estimator():
    code, out = call("risk-curve", "--set", "norms=1", "--set", "estimators=js-plain, js-positive-part, sure-limit",
                     "--set", "replications=200")
    assert code == 0
    rows = table(out)
    assert [r["estimator"] for r in rows] == ["js-plain", "js-positive-part", "sure-limit"]
    assert all(r["n"] == "limit" for r in rows)


def test_risk_curve_cv_rows_per_sample_size():
    code, out = call("risk-curve", "--set", "k=3", "--set", "norms=0, 2", "--set", "estimators=cv",
                     "--set", "sample_sizes=50, 100", "--set", "replications=5",
                     "--set", "lambdas=logspace(0.1, 10, 4)")
    assert code == 0
    assert [(r["normTheta"], r["n"]) for r in table(out)] == [("0", "50"), ("0", "100"), ("2", "50"), ("2", "100")]


def test_risk_curve_unknown_estimator():
    assert call("risk-curve", "--set", "estimators=oracle")[0] == 2


def test_js_figure_has_61_rows():
    code, out = call("js-figure", "--set", "replications=1000")
    assert code == 0
    rows = table(out)
    assert len(rows) == 61
    assert float(rows[0]["normTheta"]) == 0.0 and float(rows[-1]["normTheta"]) == pytest.approx(6.0)


def test_js_figure_plain_check_passes():
    assert call("js-figure", "--set", "replications=200000", "--check")[0] == 0


# --- sawtooth ----------------------------------------------------------------------------------------


def test_sawtooth_orthogonal_preset():
    code, out = call("sawtooth", "--set", "preset=orthogonal")
    assert code == 0
    seg = [int(r["segment_index"]) for r in table(out)]
    assert all(a >= b for a, b in zip(seg, seg[1:]))
    assert seg[0] > seg[-1]


def test_sawtooth_single_r():
    code, out = call("sawtooth", "--set", "nu=1, 2", "--set", "r_grid=2")
    assert code == 0 and len(table(out)) == 1


def test_sawtooth_rejects_ridge():
    assert call("sawtooth", "--set", "nu=1, 2", "--set", "penalty=ridge")[0] == 2


# --- output contract -----------------------------------------------------------------------------------


def test_output_is_deterministic_and_thread_independent(tmp_path):
    args = ["risk-curve", "--set", "norms=0, 1", "--set", "estimators=sure-limit", "--set", "k=3",
            "--set", "replications=50"]
    digests = set()
    for threads in ("1", "3", "0"):
        out = tmp_path / f"r{threads}.csv"
        assert run(args + ["--threads", threads, "--out", str(out)]) == 0
        digests.add(hashlib.sha256(out.read_bytes()).hexdigest())
    assert len(digests) == 1


def test_seed_env_override(monkeypatch):
    args = ("risk-curve", "--set", "norms=1", "--set", "replications=100", "--set", "seed=1")
    a = call(*args)[1]
    monkeypatch.setenv("SURECVLAB_SEED", "2")
    b = call(*args)[1]
    monkeypatch.setenv("SURECVLAB_SEED", "1")
    c = call(*args)[1]
    assert a != b and a == c


def test_full_precision_formatting():
    code, out = call("prox-eval", "--set", "theta=0.1", "--set", "lambdas=0")
    assert "0.10000000000000001" in out


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "surecvlab", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for name in ("prox-eval", "sure-landscape", "convergence-study", "risk-curve", "js-figure", "sawtooth"):
        assert name in res.stdout
    assert "exit codes" in res.stdout
