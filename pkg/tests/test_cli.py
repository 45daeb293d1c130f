from __future__ import annotations

import csv
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from hemaflow.cli import main

_INI = """\
[model]
r = constant:0.015
m = constant:0.02
death_rate = 0.005

[run]
n_compartments = 30
horizon = 20.0
initial_counts = stem_only:30
seed = 11
out_points = 11
test_functions = identity

[limit]
grid_cells = 50
dt = auto
a0 = 1.0
z0 = 0.0
mild_steps = 100
"""


@pytest.fixture()
def ini(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(_INI)
    return str(path)


def _manifest(out_dir):
    return json.loads((Path(out_dir) / "manifest.json").read_text())


def _hashes(out_dir):
    man = _manifest(out_dir)
    return {o["name"]: o["sha256"] for o in man["outputs"]}


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def test_simulate_outputs_and_manifest(ini, tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--config", ini, "--out", str(out),
                 "--replicates", "2"]) == 0
    man = _manifest(out)
    assert man["command"] == "simulate"
    assert man["seed"] == 11
    assert man["config"]["r_hat"] == 0.015
    assert man["config"]["n_compartments"] == 30
    names = {o["name"] for o in man["outputs"]}
    assert {"replicate_000.csv", "replicate_001.csv",
            "compartment_means.csv"} <= names
    # recorded digests must match the files on disk
    for o in man["outputs"]:
        blob = (out / o["name"]).read_bytes()
        assert hashlib.sha256(blob).hexdigest() == o["sha256"]
        assert len(blob) == o["bytes"]
    header, rows = _read_csv(out / "replicate_000.csv")
    assert header == ["time", "x1_scaled", "xn_scaled", "immature_mass"]
    assert len(rows) == 11


def test_reruns_are_bit_identical(ini, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["simulate", "--config", ini, "--out", str(out),
                     "--replicates", "3"]) == 0
    assert _hashes(a) == _hashes(b)


def test_worker_count_does_not_change_results(ini, tmp_path, monkeypatch):
    a = tmp_path / "a"
    assert main(["simulate", "--config", ini, "--out", str(a),
                 "--replicates", "4"]) == 0
    monkeypatch.setenv("HEMAFLOW_WORKERS", "3")
    b = tmp_path / "b"
    assert main(["simulate", "--config", ini, "--out", str(b),
                 "--replicates", "4"]) == 0
    assert _hashes(a) == _hashes(b)


def test_seed_override(ini, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", ini, "--out", str(a),
                 "--replicates", "1"]) == 0
    assert main(["simulate", "--config", ini, "--out", str(b),
                 "--replicates", "1", "--seed", "99"]) == 0
    assert _manifest(b)["seed"] == 99
    assert _hashes(a) != _hashes(b)


def test_diagnose_panel(ini, tmp_path):
    out = tmp_path / "diag"
    assert main(["diagnose", "--config", ini, "--out", str(out),
                 "--testfn", "identity"]) == 0
    header, rows = _read_csv(out / "diagnostics.csv")
    assert header[:7] == ["time", "a1", "af", "an", "m1", "mf", "mn"]
    assert "pathwise_residual" in header
    col = header.index("pathwise_residual")
    assert max(abs(float(r[col])) for r in rows) < 1e-9


def test_limit_solvers(ini, tmp_path):
    for solver in ("upwind", "mild"):
        out = tmp_path / solver
        assert main(["limit", "--config", ini, "--out", str(out),
                     "--solver", solver]) == 0
        header, rows = _read_csv(out / "series.csv")
        assert header[:3] == ["time", "a", "z"]
        assert (out / "density.csv").exists()
        assert (out / "mass_balance.csv").exists()
    # upwind publishes its conservation ledger
    header, _ = _read_csv(tmp_path / "upwind" / "series.csv")
    assert "ledger_residual" in header


def test_compare_report(ini, tmp_path):
    out = tmp_path / "cmp"
    assert main(["compare", "--config", ini, "--out", str(out),
                 "--n-list", "20,40", "--replicates", "6",
                 "--bl-cells", "64"]) == 0
    header, rows = _read_csv(out / "convergence.csv")
    assert header == ["n", "bl_distance", "batch_sem", "stem_error",
                      "mature_error"]
    assert [int(r[0]) for r in rows] == [20, 40]
    wheader, wrows = _read_csv(out / "witness.csv")
    assert wheader == ["x", "g"]
    gs = np.array([float(r[1]) for r in wrows])
    assert np.max(np.abs(gs)) <= 1.0 + 1e-9


def test_flow_checks(tmp_path):
    out = tmp_path / "flow"
    assert main(["flow-test", "--out", str(out), "--samples", "40"]) == 0
    header, rows = _read_csv(out / "flow_properties.csv")
    status = header.index("status")
    assert rows and all(r[status] == "pass" for r in rows)


def test_exit_code_2_for_config_trouble(tmp_path):
    out = tmp_path / "x"
    missing = str(tmp_path / "nope.ini")
    assert main(["simulate", "--config", missing, "--out", str(out)]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nr = warp:9\n")
    assert main(["simulate", "--config", str(bad), "--out", str(out)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_exit_code_3_for_numerical_trouble(tmp_path):
    # CFL-violating explicit dt
    ini = tmp_path / "run.ini"
    ini.write_text(_INI.replace("dt = auto", "dt = 2.0"))
    out = tmp_path / "lim"
    assert main(["limit", "--config", str(ini), "--out", str(out),
                 "--solver", "upwind"]) == 3


def test_exit_code_4_for_io_trouble(ini, tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    assert main(["simulate", "--config", ini,
                 "--out", str(blocker / "sub")]) == 4


def test_console_script_entry_point(ini, tmp_path):
    out = tmp_path / "sim"
    proc = subprocess.run(
        [sys.executable, "-m", "hemaflow.cli", "simulate", "--config", ini,
         "--out", str(out), "--replicates", "1"],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (out / "manifest.json").exists()
