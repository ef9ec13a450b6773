import csv
import io
import json

import numpy as np
import pytest

from rainbow_rf.cli import main
from rainbow_rf.config import fig1_scenario, save_scenario, scenario_from_dict
from rainbow_rf.lab import sample_network_pair
from rainbow_rf.matrix_io import read_matrix, write_matrix

from conftest import small_dict


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_theory_to_stdout(capsys):
    code, out, _ = run(capsys, "theory", "--preset", "fig1-gamma0.5", "--dim", "30", "--alpha", "0.5,2")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["alpha"] for r in rows] == ["0.5", "2.0"]
    assert list(rows[0]) == ["scenario", "alpha", "lambda", "m", "bias_term", "noise_term", "gen_error"]
    assert all(float(r["gen_error"]) > 0 for r in rows)


def test_preset_family_expands(capsys):
    code, out, _ = run(capsys, "theory", "--preset", "fig1", "--dim", "20", "--alpha", "1", "--format", "json")
    assert code == 0
    names = [r["scenario"] for r in json.loads(out)]
    assert names == ["fig1-gamma0.0", "fig1-gamma0.2", "fig1-gamma0.5", "fig1-gamma0.8"]


@pytest.mark.parametrize(
    "argv",
    [
        ["theory", "--preset", "nope"],
        ["theory"],
        ["theory", "--preset", "fig1-gamma0.5", "--threads", "0"],
        ["theory", "--preset", "fig1-gamma0.5", "--gamma", "0.5"],
        ["theory", "missing.json"],
        ["frobnicate"],
        ["theory", "--alpha", "x,y"],
        ["verify-equivalents", "--only", "bogus"],
    ],
)
def test_usage_errors_exit_2(capsys, argv):
    code, _, _ = run(capsys, *argv)
    assert code == 2


def test_invalid_scenario_exit_2(capsys, tmp_path):
    data = small_dict()
    data["student"]["layers"][1]["weight_rule"]["layer"] = 5
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    code, _, err = run(capsys, "theory", str(path))
    assert code == 2 and "forward reference" in err


def test_env_threads(capsys, monkeypatch):
    monkeypatch.setenv("RAINBOW_THREADS", "many")
    code, _, err = run(capsys, "theory", "--preset", "fig1-gamma0.5", "--dim", "20")
    assert code == 2 and "RAINBOW_THREADS" in err


def test_sweep_writes_table_and_manifest(capsys, tmp_path):
    out = tmp_path / "out"
    code, _, _ = run(
        capsys, "sweep", "--preset", "fig1-gamma0.2", "--dim", "30", "--alpha", "1", "--reps", "3", "--out", str(out)
    )
    assert code == 0
    rows = list(csv.DictReader((out / "sweep.csv").open()))
    assert rows[0]["reps"] == "3" and rows[0]["emp_mean"]
    manifest = json.loads((out / "sweep.manifest.json").read_text())
    assert manifest["scenarios"][0]["hash"] == fig1_scenario(0.2, dim=30).digest()
    assert manifest["points"][0]["status"] == "ok"


def test_sweep_no_simulate_leaves_empirical_blank(capsys):
    code, out, _ = run(capsys, "sweep", "--preset", "fig1-gamma0.2", "--dim", "20", "--alpha", "1", "--no-simulate")
    assert code == 0
    row = next(csv.DictReader(io.StringIO(out)))
    assert row["emp_mean"] == "" and row["theory_gen_error"]


def test_simulate_columns(capsys, tmp_path):
    path = tmp_path / "s.json"
    save_scenario(scenario_from_dict(small_dict()), path)
    code, out, _ = run(capsys, "simulate", str(path), "--alpha", "1", "--reps", "3", "--seed", "9")
    assert code == 0
    row = next(csv.DictReader(io.StringIO(out)))
    assert list(row) == ["scenario", "alpha", "emp_mean", "emp_stderr", "reps", "seed"]
    assert row["seed"] == "9"


def dump_weights(pair, wd):
    wd.mkdir()
    for i, w in enumerate(pair.student.weights, start=1):
        write_matrix(w, wd / f"student_{i}.rbm")
    for i, w in enumerate(pair.teacher.weights, start=1):
        write_matrix(w, wd / f"teacher_{i}.rbm")


def test_linearize_is_reproducible(capsys, tmp_path):
    sc = scenario_from_dict(small_dict(12))
    path = tmp_path / "s.json"
    save_scenario(sc, path)
    dump_weights(sample_network_pair(sc, 0), tmp_path / "w")
    outs = []
    for name in ("a", "b"):
        code, _, _ = run(capsys, "linearize", str(path), "--weights", str(tmp_path / "w"), "--out", str(tmp_path / name))
        assert code == 0
        outs.append(tmp_path / name)
    for f in ("omega.rbm", "psi.rbm", "phi.rbm", "w_eff.rbm", "c_eff.rbm", "kappa_ladder.json"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    ladder = json.loads((outs[0] / "kappa_ladder.json").read_text())
    assert ladder["provenance"]["student"] == ["estimated", "estimated"]
    assert ladder["scenario_hash"] == sc.digest()


def test_linearize_identity_has_zero_noise(capsys, tmp_path):
    data = small_dict(10)
    for net in ("teacher", "student"):
        for layer in data[net]["layers"]:
            layer["activation"] = "identity"
    sc = scenario_from_dict(data)
    path = tmp_path / "s.json"
    save_scenario(sc, path)
    dump_weights(sample_network_pair(sc, 0), tmp_path / "w")
    code, _, _ = run(capsys, "linearize", str(path), "--weights", str(tmp_path / "w"), "--out", str(tmp_path / "o"))
    assert code == 0
    assert np.array_equal(read_matrix(tmp_path / "o" / "c_eff.rbm"), np.zeros((10, 10)))


def test_linearize_failure_writes_nothing(capsys, tmp_path):
    sc = scenario_from_dict(small_dict(12))
    path = tmp_path / "s.json"
    save_scenario(sc, path)
    dump_weights(sample_network_pair(sc, 0), tmp_path / "w")
    (tmp_path / "w" / "student_2.rbm").write_bytes(b"RBM1")
    out = tmp_path / "o"
    code, _, err = run(capsys, "linearize", str(path), "--weights", str(tmp_path / "w"), "--out", str(out))
    assert code == 1 and "truncated" in err
    assert not out.exists() or not any(out.iterdir())


def test_linearize_requires_out(capsys, tmp_path):
    code, _, _ = run(capsys, "linearize", "--preset", "fig1-gamma0.5", "--weights", str(tmp_path))
    assert code == 2


def test_verify_only_single_row(capsys):
    code, out, _ = run(capsys, "verify-equivalents", "--only", "solver")
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == 2 and lines[1].startswith("solver") and "PASS" in lines[1]


def test_verify_only_comma_list(capsys, tmp_path):
    code, _, _ = run(capsys, "verify-equivalents", "--only", "solver,ridge", "--out", str(tmp_path), "--format", "json")
    assert code == 0
    rows = json.loads((tmp_path / "verify.json").read_text())
    assert [r["check"] for r in rows] == ["solver", "ridge"]
