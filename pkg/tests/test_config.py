from pathlib import Path

import numpy as np
import pytest

import rainbow_rf
from rainbow_rf.config import (
    FIG1_GAMMAS,
    CovarianceSpec,
    ScenarioError,
    check_psd,
    fig1_scenario,
    load_preset,
    load_scenario,
    materialize_covariance,
    preset_names,
    save_scenario,
    scenario_from_dict,
)
from rainbow_rf.matrix_io import write_matrix

ROOT = Path(__file__).resolve().parents[1]


def test_presets_cover_both_variants():
    names = preset_names()
    for g in FIG1_GAMMAS:
        assert f"fig1-gamma{g}" in names
        assert f"fig1caption-gamma{g}" in names


@pytest.mark.parametrize("name", ["fig1-gamma0.0", "fig1-gamma0.8", "fig1caption-gamma0.5"])
def test_presets_match_builder(name):
    variant = "caption" if name.startswith("fig1caption") else "appendix"
    gamma = float(name.split("gamma")[1])
    assert load_preset(name) == fig1_scenario(gamma, variant=variant)


def test_fig1_structure():
    sc = load_preset("fig1-gamma0.5")
    assert sc.input_dim == 1000 and sc.ridge_lambda == 1e-4
    assert sc.teacher.depth == 1 and sc.student.depth == 3
    rules = [layer.weight_rule.rule for layer in sc.student.layers]
    assert rules == ["mixed", "tied", "function_of_previous"]


def test_unknown_preset():
    with pytest.raises(ScenarioError, match="unknown preset"):
        load_preset("nope")


def test_round_trip(tmp_path):
    sc = fig1_scenario(0.2, dim=50)
    save_scenario(sc, tmp_path / "s.json")
    again = load_scenario(tmp_path / "s.json")
    assert again == sc
    assert again.digest() == sc.digest()


def test_digest_changes_with_content(small_scenario):
    from dataclasses import replace

    assert replace(small_scenario, seed=4).digest() != small_scenario.digest()


def test_forward_reference_rejected(small_data):
    small_data["student"]["layers"][1]["weight_rule"]["layer"] = 2
    with pytest.raises(ScenarioError) as err:
        scenario_from_dict(small_data)
    assert err.value.path == "student.layers[1].weight_rule.layer"
    assert "forward reference" in str(err.value)


def test_schema_error_reports_path(small_data):
    small_data["student"]["layers"][0]["width"] = "wide"
    with pytest.raises(ScenarioError) as err:
        scenario_from_dict(small_data)
    assert err.value.path == "student.layers[0].width"


@pytest.mark.parametrize(
    "field, value",
    [("ridge_lambda", 0.0), ("ridge_lambda", -1.0), ("replicates", 1)],
)
def test_semantic_errors(small_data, field, value):
    small_data[field] = value
    with pytest.raises(ScenarioError, match=field):
        scenario_from_dict(small_data)


def test_mixed_rule_only_in_student(small_data):
    small_data["teacher"]["layers"][0]["weight_rule"] = {
        "rule": "mixed",
        "cov": {"kind": "identity"},
        "layer": 1,
    }
    with pytest.raises(ScenarioError, match="only supported in the student"):
        scenario_from_dict(small_data)


def test_covariance_budget(small_data):
    small_data["input_covariance"] = {"kind": "identity", "scale": 20.0}
    with pytest.raises(ScenarioError, match="input_covariance"):
        scenario_from_dict(small_data)
    small_data["covariance_budget"] = 25.0
    scenario_from_dict(small_data)


def test_malformed_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ScenarioError, match="malformed JSON"):
        load_scenario(path)


def test_file_covariance_resolves_relative_path(tmp_path, small_data, write_json):
    write_matrix(2 * np.eye(8), tmp_path / "cov.rbm")
    small_data["input_covariance"] = {"kind": "file", "path": "cov.rbm"}
    sc = load_scenario(write_json(small_data))
    cov = materialize_covariance(sc.input_covariance, 8)
    assert np.array_equal(cov, 2 * np.eye(8))


def test_materialize_examples():
    assert np.array_equal(materialize_covariance(CovarianceSpec.identity(), 3), np.eye(3))
    pl = materialize_covariance(CovarianceSpec.power_law(0.5), 4)
    assert np.allclose(np.diag(pl), [1, 2**-0.5, 3**-0.5, 0.5])
    mix = materialize_covariance(
        CovarianceSpec("shifted_power_law_mix", weights=(0.5, 0.5), exponents=(0.0, 1.0)), 2
    )
    assert np.allclose(np.diag(mix), [1.0, 0.75])
    w = np.random.default_rng(0).standard_normal((5, 5))
    fn = materialize_covariance(CovarianceSpec("function_of_weights", rule="inv_gram_plus_half", layer=1), 5, {1: w})
    assert np.allclose(fn @ (w @ w.T + 0.5 * np.eye(5)), np.eye(5), atol=1e-10)


def test_materialize_missing_context():
    with pytest.raises(ValueError, match="needs the weights"):
        materialize_covariance(CovarianceSpec("function_of_weights", rule="inv_gram_plus_half", layer=1), 3)


def test_check_psd_does_not_repair():
    check_psd(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        check_psd(np.diag([1.0, -1e-3]))
    with pytest.raises(ValueError):
        check_psd(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_with_dim():
    sc = fig1_scenario(0.5, dim=1000).with_dim(60)
    assert sc.input_dim == 60
    assert all(layer.width == 60 for layer in sc.student.layers)


def test_schema_copies_identical():
    packaged = Path(rainbow_rf.__file__).with_name("scenario.schema.json")
    assert packaged.read_bytes() == (ROOT / "docs" / "scenario.schema.json").read_bytes()
