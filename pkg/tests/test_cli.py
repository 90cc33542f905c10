import json
import subprocess
import sys
from pathlib import Path

import pytest

from reclq.cli import main

PROBLEMS = Path(__file__).resolve().parents[1] / "problems"


def run(tmp_path, *argv, name="out"):
    out = tmp_path / name
    code = main([*argv, "--out", str(out), "--quiet"])
    return code, out


def test_validate_ok(tmp_path):
    code, out = run(tmp_path, "validate", str(PROBLEMS / "scalar.yaml"))
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["subcommand"] == "validate"
    assert manifest["seed"] == 0
    assert {"problem", "config", "version", "backend"} <= set(manifest)
    assert json.loads((out / "report.json").read_text())["exit_code"] == 0


def test_validate_bad_R_exits_1(tmp_path):
    code, out = run(tmp_path, "validate", str(PROBLEMS / "bad_R.yaml"))
    assert code == 1
    assert "NotPositiveDefinite" in (out / "report.json").read_text()


def test_missing_file_is_validation_error(tmp_path):
    code, _ = run(tmp_path, "validate", str(tmp_path / "nope.yaml"))
    assert code == 1


def test_transform_roundtrip(tmp_path):
    code, out = run(tmp_path, "transform", str(PROBLEMS / "system3.yaml"), "--check-roundtrip")
    assert code == 0
    assert "At" in (out / "summary.txt").read_text()


def test_stability(tmp_path):
    code, out = run(tmp_path, "stability", str(PROBLEMS / "scalar.yaml"))
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["verdict"]["stable"] is True


def test_synthesize_csv_is_reproducible(tmp_path):
    _, a = run(tmp_path, "synthesize", str(PROBLEMS / "system3.yaml"), name="a")
    _, b = run(tmp_path, "synthesize", str(PROBLEMS / "system3.yaml"), name="b")
    assert (a / "synthesis.csv").read_bytes() == (b / "synthesis.csv").read_bytes()
    assert (a / "synthesis.csv").read_text().startswith("s,eta_1,eta_2,eta_3,vbar_1,vbar_2")


def test_simulate_csv_is_reproducible(tmp_path):
    args = ("simulate", str(PROBLEMS / "scalar_F2.yaml"), "--paths", "200", "--dt", "0.01",
            "--save-paths", "3")
    ca, a = run(tmp_path, *args, name="a")
    cb, b = run(tmp_path, *args, name="b")
    assert ca == cb == 0
    assert (a / "trajectories.csv").read_bytes() == (b / "trajectories.csv").read_bytes()
    rep = json.loads((a / "report.json").read_text())
    assert rep["simulation"]["cost_se"] > 0


def test_simulate_with_gain_file(tmp_path):
    code, _ = run(tmp_path, "simulate", str(PROBLEMS / "scalar.yaml"), "--control", "file",
                  "--gain", str(PROBLEMS / "corrupted_gain.yaml"), "--paths", "10",
                  "--dt", "0.01")
    assert code == 0


def test_verify_scalar(tmp_path):
    code, out = run(tmp_path, "verify", str(PROBLEMS / "scalar.yaml"), "--paths", "20",
                    "--dt", "0.005", "--perturbations", "3")
    assert code == 0, (out / "summary.txt").read_text()


def test_verify_corrupted_gain_exits_3(tmp_path):
    code, _ = run(tmp_path, "verify", str(PROBLEMS / "scalar.yaml"), "--theta",
                  str(PROBLEMS / "corrupted_gain.yaml"), "--paths", "20", "--dt", "0.005",
                  "--perturbations", "3")
    assert code == 3


def test_reduce(tmp_path):
    code, out = run(tmp_path, "reduce", str(PROBLEMS / "forced.yaml"), "--paths", "200",
                    "--dt", "0.01", "--tmax", "20", "--save-paths", "2")
    assert code == 0
    assert (out / "reduction.csv").exists()


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "reclq", "validate",
                          str(PROBLEMS / "bad_R.yaml"), "--out", str(tmp_path / "x")],
                         capture_output=True, text=True)
    assert res.returncode == 1
    assert res.stdout.strip() == (tmp_path / "x" / "summary.txt").read_text().strip()


def test_unknown_subcommand():
    with pytest.raises(SystemExit):
        main(["frobnicate"])
