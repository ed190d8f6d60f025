import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from mflq.cli import main

PROBLEMS = Path(__file__).resolve().parents[1] / "problems"
EXAMPLE = str(PROBLEMS / "example31.json")
JUMPS = str(PROBLEMS / "jump2d.json")


def _run(tmp_path, *argv, name="out"):
    out = tmp_path / name
    return main([*argv, "--out", str(out)]), out


def test_analyze_reports_dissipation_constants(tmp_path):
    rc, out = _run(tmp_path, "analyze", EXAMPLE)
    assert rc == 0
    rep = json.loads((out / "analyze.json").read_text())
    assert rep["kappa1"] == pytest.approx(2.0) and rep["kappa2"] == pytest.approx(1.0)
    assert rep["kappa1_t"] == pytest.approx(0.5) and rep["kappa2_t"] == pytest.approx(0.5)
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == 0 and "analyze.json" in man["files"]


def test_example31_matches_closed_form(tmp_path):
    rc, out = _run(tmp_path, "example31", "--paths", "8", "--T", "8", "--dt", "2e-3")
    assert rc == 0
    lines = (out / "optimize.csv").read_text().splitlines()
    cols = lines[0].split(",")
    data = np.loadtxt(lines[1:], delimiter=",")
    x, x_exact = data[:, cols.index("mean_x1")], data[:, cols.index("x_exact")]
    np.testing.assert_allclose(x, x_exact, atol=2e-3)


def test_missing_file_exits_2(tmp_path, capsys):
    rc, _ = _run(tmp_path, "analyze", str(tmp_path / "nope.json"))
    assert rc == 2
    assert "file not found" in capsys.readouterr().err


def test_parse_error_exits_2_with_location(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"dims": {"n": 1,}\n')
    rc, _ = _run(tmp_path, "analyze", str(bad))
    assert rc == 2
    assert "bad.json:1:18:" in capsys.readouterr().err


def test_bad_option_exits_2(tmp_path):
    rc, _ = _run(tmp_path, "simulate", EXAMPLE, "--paths", "0")
    assert rc == 2
    rc, _ = _run(tmp_path, "solve-hamiltonian", EXAMPLE, "--damping", "2")
    assert rc == 2


def test_precondition_violation_exits_3(tmp_path, capsys):
    rc, _ = _run(tmp_path, "solve-hamiltonian", EXAMPLE, "--K", "5", "--paths", "8")
    assert rc == 3
    assert "K=5" in capsys.readouterr().err


def test_simulate_is_deterministic(tmp_path):
    argv = ("simulate", JUMPS, "--paths", "32", "--seed", "3", "--T", "1")
    rc1, a = _run(tmp_path, *argv, name="a")
    rc2, b = _run(tmp_path, *argv, name="b")
    assert rc1 == rc2 == 0
    da = hashlib.sha256((a / "simulate.csv").read_bytes()).hexdigest()
    db = hashlib.sha256((b / "simulate.csv").read_bytes()).hexdigest()
    assert da == db
    man = json.loads((a / "manifest.json").read_text())
    assert man["files"]["simulate.csv"] == da
    assert man["versions"]["kernel_backend"] in ("cython", "python")


def test_solve_hamiltonian_writes_log(tmp_path):
    rc, out = _run(tmp_path, "solve-hamiltonian", JUMPS, "--paths", "16", "--T", "2")
    assert rc == 0
    log = (out / "continuation_log.csv").read_text().splitlines()
    assert log[0].split(",")[:2] == ["alpha", "delta"]
    alpha = np.loadtxt(log[1:], delimiter=",", ndmin=2)[:, 0]
    assert alpha[-1] == 1.0 and np.all(np.diff(alpha) >= 0)
