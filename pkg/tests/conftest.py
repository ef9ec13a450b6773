import copy
import json

import pytest

from rainbow_rf.config import fig1_scenario, scenario_from_dict


def small_dict(dim: int = 8) -> dict:
    """A valid two-layer student / one-layer teacher scenario as plain JSON."""
    fresh = {"rule": "fresh_gaussian", "cov": {"kind": "identity", "scale": 1.0}}
    return {
        "name": "small",
        "input_dim": dim,
        "input_covariance": {"kind": "identity", "scale": 1.0},
        "teacher": {"layers": [{"width": dim, "activation": "tanh", "weight_rule": fresh}]},
        "student": {
            "layers": [
                {"width": dim, "activation": "tanh", "weight_rule": fresh},
                {"width": dim, "activation": "erf", "weight_rule": {"rule": "tied", "layer": 1}},
            ]
        },
        "ridge_lambda": 0.1,
        "sample_ratios": [0.5, 1.0],
        "replicates": 4,
        "seed": 3,
    }


@pytest.fixture
def small_data():
    return copy.deepcopy(small_dict())


@pytest.fixture
def small_scenario():
    return scenario_from_dict(small_dict())


@pytest.fixture
def fig1_small():
    return fig1_scenario(0.5, dim=40)


@pytest.fixture
def write_json(tmp_path):
    def _write(data, name="scenario.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return path

    return _write


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record one ``AC<n> PASS|FAIL: detail`` line, echoed in the terminal summary."""

    def _report(number: int, passed: bool, detail: str) -> None:
        line = f"AC{number} {'PASS' if passed else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s[2:].split()[0])):
            terminalreporter.write_line(line)
