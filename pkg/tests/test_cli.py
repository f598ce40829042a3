import json
import subprocess
import sys
from pathlib import Path

import pytest

from porecell import cli
from porecell.macro_solver import SimulationError

CONFIG = {
    "macro_mesh": [6, 6],
    "time": {"T": 0.02, "dt": 0.002, "snapshot_every": 5},
    "microstructure": {
        "R_init": {"name": "trig", "params": {"amplitude": 0.08, "offset": 0.16}},
        "table": {"n_samples": 3, "cell_resolution": 8, "formulation": "moving"},
    },
    "physics": {
        "f": {"name": "linear", "params": {"a": 0.5, "b": -1.0}},
        "g": {"name": "tapered-reaction", "params": {"k_p": 1.0, "k_d": 0.3, "delta": 0.02, "u_cap": 10.0}},
        "h0": {"name": "constant", "params": {"value": [1.0, 0.5]}},
        "u_init": {"name": "trig", "params": {"amplitude": 1.0}},
    },
    "output": {"dir": "out", "formats": ["csv", "vtk"]},
}


@pytest.fixture()
def config_file(tmp_path):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(CONFIG))
    return path


def run(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "porecell", *map(str, args)], capture_output=True, text=True, cwd=cwd)


def test_solve_writes_headed_outputs_and_reuses_cache(tmp_path, config_file):
    cache = tmp_path / "cache"
    out = tmp_path / "run"
    r = run("--cache-dir", cache, "solve", config_file, "--output", out)
    assert r.returncode == 0, r.stderr
    assert "clamps=0" in r.stdout
    files = sorted(out.iterdir())
    names = {f.name for f in files}
    assert {"diagnostics.csv", "snapshot_0000.csv", "velocity_0000.csv", "snapshot_0000.vtk"} <= names
    assert "snapshot_0002.csv" in names
    for f in files:
        text = f.read_text()
        first = text.splitlines()[1] if f.suffix == ".vtk" else text.splitlines()[0]
        assert first.startswith("porecell ") or first.startswith("# porecell ")
        assert "config_hash=" in first
    r2 = run("--cache-dir", cache, "solve", config_file, "--output", tmp_path / "run2")
    assert r2.returncode == 0 and "cache hit" in r2.stdout
    for f in files:
        assert (tmp_path / "run2" / f.name).read_bytes() == f.read_bytes()


def test_tabulate_writes_table(tmp_path, config_file):
    r = run("--cache-dir", tmp_path / "cache", "tabulate", config_file, "--output", tmp_path / "tab", "--no-cache")
    assert r.returncode == 0, r.stderr
    text = (tmp_path / "tab" / "coefficients.csv").read_text().splitlines()
    assert text[0].startswith("# porecell ") and text[1].startswith("R,theta,dstar,kstar")
    assert len(text) == 2 + 3
    assert (tmp_path / "tab" / "coefficients.csv.meta").exists()
    assert not (tmp_path / "cache").exists()


def test_default_output_dir_is_relative_to_cwd(tmp_path, config_file):
    r = run("--cache-dir", tmp_path / "cache", "solve", config_file, cwd=tmp_path)
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "out" / "diagnostics.csv").exists()


def test_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"microstructure": {"R_min": 0.3}}))
    r = run("solve", bad)
    assert r.returncode == 1
    assert "R_min" in r.stderr
    assert run("solve", tmp_path / "missing.json").returncode == 1


def test_solver_error_exit_code(tmp_path, config_file, monkeypatch, capsys):
    import porecell.macro_solver as ms

    def boom(*a, **k):
        raise SimulationError("step 3 (t = 0.006) failed: singular", step=3)

    monkeypatch.setattr(ms, "run_problem", boom)
    code = cli.main(["--cache-dir", str(tmp_path / "cache"), "solve", str(config_file), "--output", str(tmp_path / "o")])
    assert code == 2
    assert "solver error" in capsys.readouterr().err


def test_mms_darcy_passes(capsys):
    assert cli.main(["mms", "darcy"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("# darcy") and "pass" in out


def test_parser_rejects_unknown_case():
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["mms", "stokes"])


def test_verify_perturbed_adjugate_fails(tmp_path):
    report = tmp_path / "report.csv"
    r = run("verify", "--perturb-adjugate", "1e-3", "--report", report)
    assert r.returncode == 3
    rows = {ln.split(",")[0]: ln.split(",") for ln in report.read_text().splitlines()[1:]}
    assert report.read_text().startswith("# porecell ")
    piola = rows["piola_identity"]
    assert piola[3] == "FAIL" and float(piola[1]) > 1e-3
    assert r.stdout == report.read_text()
