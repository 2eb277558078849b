import json
import os
import sys

import pytest

# Add the project root to the Python path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', '..')))

from QSRStudio.cli import EXIT_ERROR, EXIT_NOT_CERTIFIED, EXIT_OK, main
from QSRStudio.tests.common import data_file


def fixture(name):
    return data_file("fixtures", name)


def _read(out, name):
    with open(os.path.join(out, name), "r") as f:
        return json.load(f)


def test_version_exits_cleanly():
    """Tests that --version is not treated as an error."""
    assert main(["--version"]) == EXIT_OK

def test_unknown_command_is_an_error():
    """Tests that argument errors map to exit code 1."""
    assert main(["certify", "--network", fixture("t3_passive.json")]) == EXIT_ERROR

def test_analyze_certified_network(tmp_path):
    """Tests analyze on the decoupled fixture: exit 0, report and log written."""
    out = str(tmp_path / "out")
    assert main(["analyze", "--network", fixture("decoupled_passive.json"), "--out", out]) == EXIT_OK
    report = _read(out, "report.json")
    assert report["certified"] is True
    assert report["network_hash"].startswith("sha256:")
    assert all("wall_time" not in step for step in report["steps"])
    assert os.path.exists(os.path.join(out, "qsrstudio.log"))

def test_analyze_uncertified_network(tmp_path):
    """Tests that an uncertified analysis exits with 2."""
    out = str(tmp_path / "out")
    assert main(["analyze", "--network", fixture("t3_passive.json"), "--out", out]) == EXIT_NOT_CERTIFIED
    assert _read(out, "report.json")["certified"] is False

def test_sequence_by_name_and_timing(tmp_path):
    """Tests --sequence with names and --include-timing."""
    out = str(tmp_path / "out")
    code = main(["analyze", "--network", fixture("decoupled_passive.json"), "--out", out,
                 "--sequence", "right,left", "--include-timing"])
    assert code == EXIT_OK
    report = _read(out, "report.json")
    assert report["sequence"] == [1, 0]
    assert all("wall_time" in step for step in report["steps"])

def test_supply_override(tmp_path):
    """Tests that --supply replaces every supply rate of the file."""
    out = str(tmp_path / "out")
    code = main(["analyze", "--network", fixture("decoupled_passive.json"), "--out", out, "--supply", "L2:10"])
    assert code == EXIT_OK
    assert _read(out, "report.json")["steps"][0]["structured"] is False

def test_invalid_option_values(tmp_path):
    """Tests that a negative tolerance and an unknown preset are errors."""
    out = str(tmp_path / "out")
    assert main(["analyze", "--network", fixture("decoupled_passive.json"), "--out", out, "--eps", "-1"]) == EXIT_ERROR
    assert main(["analyze", "--network", fixture("decoupled_passive.json"), "--out", out,
                 "--supply", "lossless"]) == EXIT_ERROR

def test_missing_network_file(tmp_path):
    """Tests that an unreadable network file exits with 1."""
    out = str(tmp_path / "out")
    assert main(["analyze", "--network", str(tmp_path / "nope.json"), "--out", out]) == EXIT_ERROR

def test_synthesize_writes_gains(tmp_path):
    """Tests synthesize on the scalar plant: exit 0 and a stabilizing K in gains.json."""
    out = str(tmp_path / "out")
    assert main(["synthesize", "--network", fixture("scalar_plant.json"), "--out", out]) == EXIT_OK
    gains = _read(out, "gains.json")["gains"]
    assert [(g["i"], g["j"]) for g in gains] == [(0, 0)]
    assert gains[0]["K"][0][0] < -1.0

@pytest.mark.slow
def test_synthesize_rank_deficient_plant(tmp_path):
    """Tests that an unreachable unstable state ends with exit 2."""
    out = str(tmp_path / "out")
    assert main(["synthesize", "--network", fixture("rank_deficient.json"), "--out", out]) == EXIT_NOT_CERTIFIED
    report = _read(out, "report.json")
    assert report["steps"][0]["status"] in ("infeasible", "failed")

def test_compose_then_simulate(tmp_path):
    """Tests analyze, compose and simulate chained through the written files."""
    base = str(tmp_path / "base")
    joined = str(tmp_path / "joined")
    sim = str(tmp_path / "sim")
    assert main(["analyze", "--network", fixture("decoupled_passive.json"), "--out", base]) == EXIT_OK
    code = main(["compose", "--network", fixture("decoupled_passive.json"), "--report", os.path.join(base, "report.json"),
                 "--add", fixture("disconnected_passive.json"), "--out", joined])
    assert code == EXIT_OK
    report = _read(joined, "report.json")
    assert report["mode"] == "compositional"
    assert report["sequence"] == [0, 1, 2]
    scenario = tmp_path / "scenario.json"
    scenario.write_text(json.dumps({"horizon": 0.5, "step": 0.001, "x0": [1.0, -1.0, 0.5],
                                    "disturbance": {"kind": "piecewise", "amplitude": 1.0, "hold": 0.05}}))
    code = main(["simulate", "--network", os.path.join(joined, "network.json"),
                 "--report", os.path.join(joined, "report.json"), "--scenario", str(scenario), "--out", sim])
    assert code == EXIT_OK
    assert _read(sim, "audit.json")["verdict"] is True

def test_compose_rejects_mismatched_report(tmp_path):
    """Tests that a report made for another network file is refused."""
    base = str(tmp_path / "base")
    assert main(["synthesize", "--network", fixture("scalar_plant.json"), "--out", base]) == EXIT_OK
    code = main(["compose", "--network", fixture("decoupled_passive.json"), "--report", os.path.join(base, "report.json"),
                 "--add", fixture("disconnected_passive.json"), "--out", str(tmp_path / "joined")])
    assert code == EXIT_ERROR

def test_simulate_certified_report(tmp_path):
    """Tests simulate with the stored scalar report: outputs written and audit passed."""
    out = str(tmp_path / "out")
    code = main(["simulate", "--network", fixture("scalar_plant.json"),
                 "--report", data_file("reports", "scalar_plant_certified.json"),
                 "--scenario", data_file("scenarios", "scalar_disturbance.json"), "--out", out, "--seed", "3"])
    assert code == EXIT_OK
    for name in ("trajectory.csv", "trajectory.json", "audit.json"):
        assert os.path.exists(os.path.join(out, name))
    assert _read(out, "trajectory.json")["seed"] == 3

def test_simulate_flipped_gain_fails_audit(tmp_path):
    """Tests that a destabilizing stored gain exits with 2."""
    out = str(tmp_path / "out")
    code = main(["simulate", "--network", fixture("scalar_plant.json"),
                 "--report", data_file("reports", "scalar_plant_flipped.json"),
                 "--scenario", data_file("scenarios", "scalar_disturbance.json"), "--out", out])
    assert code == EXIT_NOT_CERTIFIED
    assert _read(out, "audit.json")["verdict"] is False

def test_simulate_zero_horizon_is_an_error(tmp_path):
    """Tests that a scenario without steps exits with 1."""
    out = str(tmp_path / "out")
    code = main(["simulate", "--network", fixture("scalar_plant.json"),
                 "--report", data_file("reports", "scalar_plant_certified.json"),
                 "--scenario", data_file("scenarios", "zero_horizon.json"), "--out", out])
    assert code == EXIT_ERROR

def test_supply_override_changes_network_hash(tmp_path):
    """Tests that a report made under --supply carries a hash other than the file's."""
    plain, overridden = str(tmp_path / "plain"), str(tmp_path / "override")
    assert main(["analyze", "--network", fixture("decoupled_passive.json"), "--out", plain]) == EXIT_OK
    assert main(["analyze", "--network", fixture("decoupled_passive.json"), "--out", overridden,
                 "--supply", "L2:10"]) == EXIT_OK
    assert _read(plain, "report.json")["network_hash"] != _read(overridden, "report.json")["network_hash"]

def test_simulate_refuses_report_of_overridden_supply(tmp_path):
    """Tests that a report certified under --supply does not simulate against the unmodified file."""
    base, sim = str(tmp_path / "base"), str(tmp_path / "sim")
    assert main(["synthesize", "--network", fixture("scalar_plant.json"), "--out", base, "--supply", "L2:10"]) == EXIT_OK
    args = ["simulate", "--network", fixture("scalar_plant.json"), "--report", os.path.join(base, "report.json"),
            "--scenario", data_file("scenarios", "scalar_disturbance.json"), "--out", sim]
    assert main(args) == EXIT_ERROR
    assert main(args + ["--supply", "L2:10"]) == EXIT_OK

def test_simulate_takes_no_solver_options(tmp_path):
    """Tests that simulate rejects the tolerances it would not use."""
    out = str(tmp_path / "out")
    code = main(["simulate", "--network", fixture("scalar_plant.json"),
                 "--report", data_file("reports", "scalar_plant_certified.json"),
                 "--scenario", data_file("scenarios", "scalar_disturbance.json"), "--out", out, "--eps-pd", "1e-6"])
    assert code == EXIT_ERROR

def test_objective_is_recorded(tmp_path):
    """Tests that --objective reaches the solver settings stored in the report."""
    out = str(tmp_path / "out")
    assert main(["synthesize", "--network", fixture("scalar_plant.json"), "--out", out,
                 "--objective", "min-trace"]) == EXIT_OK
    assert _read(out, "report.json")["settings"]["objective"] == "min-trace"
