import csv
import io
import json
import subprocess
import sys

import pytest

from kamlattice import __version__
from kamlattice.cli import main


def run(argv, tmp_path, capsys, config=None):
    if config is not None:
        path = tmp_path / "run.json"
        path.write_text(json.dumps(config))
        argv = argv + ["--config", str(path)]
    code = main(argv + ["--output-dir", str(tmp_path / "out")])
    out, err = capsys.readouterr()
    return code, out, err


def test_version():
    proc = subprocess.run([sys.executable, "-m", "kamlattice.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.startswith(f"kamlattice {__version__}") and "numpy" in proc.stdout


def test_nonres_check_resonant_exits_2(tmp_path, capsys):
    code, out, _ = run(["nonres", "check"], tmp_path, capsys, {"nonres": {"omega": [1.0, 1.0], "gamma": 1e-6}})
    assert code == 2
    witness = json.loads(out)
    assert witness["verdict"] == "violated" and witness["pairing"] == 0.0


def test_nonres_check_flag_override(tmp_path, capsys):
    code, out, _ = run(["nonres", "check", "--omega", "1.0", "--gamma", "0.1"], tmp_path, capsys)
    assert code == 0 and json.loads(out)["verdict"] == "holds"


def test_nonres_measure_csv(tmp_path, capsys):
    code, out, _ = run(["nonres", "measure", "--gamma", "0.02", "--samples", "2000", "--budget-l1", "4"],
                       tmp_path, capsys)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 1
    assert {"gamma", "fraction", "ci95", "samples"} <= set(rows[0])
    assert 0 <= float(rows[0]["fraction"]) <= 1 and float(rows[0]["ci95"]) >= 0
    assert (tmp_path / "out" / "nonres_measure.csv").read_text() == out


def test_nonres_control_with_exponent_bound_grid(tmp_path, capsys):
    config = {"nonres": {"control": {"kind": "double-exp", "params": {"lam": 0.5}}, "exponent_bound": {}}}
    code, out, _ = run(["nonres", "control"], tmp_path, capsys, config)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    for row in rows:
        assert float(row["inverse_rho"]) == pytest.approx(float(row["rho"]), rel=1e-9)
    grid = list(csv.DictReader(open(tmp_path / "out" / "exponent_bound.csv")))
    assert len(grid) == 9 and all(r["holds"] == "1" for r in grid)


def test_malformed_config_exits_1_with_schema_path(tmp_path, capsys):
    code, _, err = run(["nonres", "sample"], tmp_path, capsys, {"nonres": {"mu": -1}})
    assert code == 1
    assert "/nonres/mu" in err and "schema" in err
    code, _, err = run(["nonres", "sample"], tmp_path, capsys, {"nonres": {"unknown_key": 1}})
    assert code == 1 and "unknown_key" in err


def test_unreadable_config_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["nonres", "sample", "--config", str(bad)]) == 1
    assert "not valid JSON" in capsys.readouterr().err


def test_kam_pendulum_history(tmp_path, capsys):
    code, out, _ = run(["kam", "--fixture", "pendulum"], tmp_path, capsys)
    assert code == 0
    steps = [json.loads(line) for line in (tmp_path / "out" / "kam_history.jsonl").read_text().splitlines()]
    eps = [s["eps"] for s in steps]
    assert len(eps) >= 5
    assert all(b < a for a, b in zip(eps, eps[1:]))
    fit = json.loads((tmp_path / "out" / "kam_fit.json").read_text())
    assert fit["status"] == "converged" and fit == json.loads(out)
    assert (tmp_path / "out" / "kam_embedding_u.json").exists()
    assert (tmp_path / "out" / "kam_embedding_v.json").exists()


def test_kam_integrable_marks_fit_na(tmp_path, capsys):
    code, out, _ = run(["kam", "--fixture", "integrable"], tmp_path, capsys)
    summary = json.loads(out)
    assert code == 0 and summary["status"] == "converged"
    assert summary["loglog_slope"] == "n/a"


def test_kam_divergent_exits_3(tmp_path, capsys):
    code, out, err = run(["kam", "--fixture", "divergent"], tmp_path, capsys)
    assert code == 3
    assert json.loads(out)["error"] == "Diverged"
    assert json.loads((tmp_path / "out" / "kam_history.jsonl").read_text())["status"] == "diverged"


def test_breather_harmonic_potential_exits_4(tmp_path, capsys):
    config = {"breather": {"lattice": {"V": {"kind": "monomial", "p": 1}}}}
    code, _, err = run(["breather"], tmp_path, capsys, config)
    assert code == 4 and "NondegeneracyViolated" in err


def test_breather_large_coupling_exits_3(tmp_path, capsys):
    config = {"breather": {"lattice": {"N": 1}, "actions": {"mode": "large", "xi_large": 0.5}}}
    code, _, err = run(["breather", "--q-c", "0.1"], tmp_path, capsys, config)
    assert code == 3 and "Diverged" in err


def test_breather_uncoupled_passes(tmp_path, capsys):
    config = {"breather": {"lattice": {"N": 4, "q_c": 0.0}, "verify": {"horizon": 300.0}}}
    code, out, _ = run(["breather"], tmp_path, capsys, config)
    assert code == 0, out
    res = tmp_path / "out"
    cert = json.loads((res / "certificate.json").read_text())
    assert cert["model"]["coupling_l1"] == 0.0
    header = (res / "trajectory.csv").read_text().splitlines()[0]
    assert header == "t," + ",".join(f"x_{n}" for n in range(-4, 5))
    assert json.loads((res / "verification.json").read_text())["passed"] is True


def test_output_dir_from_environment(tmp_path, capsys, monkeypatch):
    target = tmp_path / "from_env"
    monkeypatch.setenv("KAMLATTICE_OUTPUT_DIR", str(target))
    assert main(["nonres", "measure", "--gamma", "0.02", "--samples", "200", "--budget-l1", "3"]) == 0
    capsys.readouterr()
    assert (target / "nonres_measure.csv").exists()


def test_bad_thread_env_exits_1(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("KAMLATTICE_THREADS", "many")
    code, _, err = run(["nonres", "sample"], tmp_path, capsys)
    assert code == 1 and "KAMLATTICE_THREADS" in err


def test_measure_is_deterministic_across_threads(tmp_path, capsys):
    argv = ["nonres", "measure", "--gamma", "0.02", "0.04", "--samples", "1000", "--budget-l1", "4", "--seed", "5"]
    _, one, _ = run(argv + ["--threads", "1"], tmp_path, capsys)
    _, four, _ = run(argv + ["--threads", "4"], tmp_path, capsys)
    assert one == four
