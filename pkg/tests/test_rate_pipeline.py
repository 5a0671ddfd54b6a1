"""
End-to-end tests for the rate_pipeline command line.
"""

import json
import sys
from pathlib import Path

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

import pytest
from rate_pipeline import (
    EXIT_IO,
    EXIT_OK,
    EXIT_SOLVER,
    EXIT_VALIDATION,
    cross_checks,
    exit_code_for,
    main,
)
from ratefn.mc_sim import SimulationError
from ratefn.model import ModelError, SpecFormatError
from ratefn.rate_solver import ConvergenceError
from ratefn.report_io import dumps_json
from ratefn.skorokhod import SPVerificationError

PROJECT_ROOT = Path(__file__).parent.parent


def run(capsys, out_dir, *argv):
    """Run the CLI and return (exit code, stdout, stderr)."""
    code = main(["-o", str(out_dir), *argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def run_json(capsys, out_dir, *argv):
    code, out, err = run(capsys, out_dir, *argv)
    return code, json.loads(out), err


@pytest.fixture
def scenario(tmp_path):
    def _write(tasks, name="scenario.json"):
        path = tmp_path / name
        path.write_text(json.dumps(tasks), encoding="utf-8")
        return str(path)
    return _write


@pytest.fixture
def path_file(tmp_path):
    def _write(pairs, name="path.json"):
        path = tmp_path / name
        path.write_text(json.dumps(pairs), encoding="utf-8")
        return str(path)
    return _write


class TestExitCodes:
    """Failure classes map to documented exit codes."""

    @pytest.mark.parametrize("exc,code", [
        (ModelError("bad"), EXIT_VALIDATION),
        (TypeError("bad"), EXIT_VALIDATION),
        (ConvergenceError("slow"), EXIT_SOLVER),
        (SPVerificationError("off"), EXIT_SOLVER),
        (SimulationError("offset"), EXIT_SOLVER),
        (FileNotFoundError("gone"), EXIT_IO),
        (json.JSONDecodeError("bad", "{", 0), EXIT_IO),
        (KeyError("j9"), EXIT_IO),
        (SpecFormatError("no routing"), EXIT_IO),
    ])
    def test_mapping(self, exc, code):
        assert exit_code_for(exc) == code

    def test_unexpected_error_propagates(self):
        with pytest.raises(RuntimeError):
            exit_code_for(RuntimeError("bug"))


class TestValidate:
    """validate command."""

    def test_registry_network(self, capsys, tmp_path):
        code, result, _ = run_json(capsys, tmp_path, "validate", "--network", "J2")
        assert code == EXIT_OK
        assert result["valid"]
        assert all(check["reachable"] for check in result["communication"])
        assert (tmp_path / "validate.json").exists()
        assert (tmp_path / "manifest.json").exists()

    def test_capacity_fractions(self, capsys, tmp_path, write_network):
        spec = write_network({"type": "processor_sharing", "a": [1, 1], "sigma": [3, 3], "f": [0.45, 0.45]})
        code, result, err = run_json(capsys, tmp_path, "validate", "--network", spec)
        assert code == EXIT_VALIDATION
        assert not result["valid"]
        assert "f does not sum to 1" in err

    def test_reducible_routing(self, capsys, tmp_path, write_network):
        spec = write_network({"type": "jackson", "a": [1, 1], "sigma": [1, 1],
                              "routing": [[0.5, 0.0, 0.5], [1.0, 0.0, 0.0]]})
        code, result, _ = run_json(capsys, tmp_path, "validate", "--network", spec)
        assert code == EXIT_VALIDATION
        assert any("irreducibility" in v for v in result["violations"])

    def test_malformed_json(self, capsys, tmp_path):
        spec = tmp_path / "broken.json"
        spec.write_text("{not json", encoding="utf-8")
        code, _, err = run(capsys, tmp_path, "validate", "--network", str(spec))
        assert code == EXIT_IO
        assert "ERROR" in err

    def test_missing_network(self, capsys, tmp_path):
        code, _, _ = run(capsys, tmp_path, "validate", "--network", str(tmp_path / "missing.json"))
        assert code == EXIT_IO

    def test_missing_field(self, capsys, tmp_path, write_network):
        spec = write_network({"type": "jackson", "a": [1.0]})
        code, _, _ = run(capsys, tmp_path, "validate", "--network", spec)
        assert code == EXIT_IO

    def test_wrong_field_type(self, capsys, tmp_path, write_network):
        spec = write_network({"type": "processor_sharing", "a": [1, 1], "sigma": [3, 3], "f": "half"})
        code, _, err = run(capsys, tmp_path, "validate", "--network", spec)
        assert code == EXIT_IO
        assert "Malformed network spec" in err

    def test_not_an_object(self, capsys, tmp_path, write_network):
        code, _, _ = run(capsys, tmp_path, "validate", "--network", write_network([1, 2]))
        assert code == EXIT_IO


class TestRate:
    """rate command."""

    def test_overloaded_queue(self, capsys, tmp_path):
        code, result, _ = run_json(capsys, tmp_path, "rate", "--network", "J1", "--point", "0", "--beta", "0")
        assert code == EXIT_OK
        assert result["value"] == pytest.approx(1.0, abs=1e-8)
        assert result["K"] == [1]
        assert result["c"]["e1"] == pytest.approx(0.5, abs=1e-6)

    def test_stable_queue(self, capsys, tmp_path):
        code, result, _ = run_json(capsys, tmp_path, "rate", "--network", "J1s", "--point", "0", "--beta", "0")
        assert code == EXIT_OK
        assert result["value"] == pytest.approx(0.0, abs=1e-8)

    def test_off_facet_velocity(self, capsys, tmp_path):
        code, result, _ = run_json(capsys, tmp_path, "rate", "--network", "J1", "--K", "1", "--beta", "0.5")
        assert code == EXIT_OK
        assert result["status"] == "infinite"

    def test_oracle(self, capsys, tmp_path):
        code, result, err = run_json(capsys, tmp_path, "rate", "--network", "J1", "--point", "0", "--oracle")
        assert code == EXIT_OK
        assert result["oracle"]["value"] == pytest.approx(1.0, abs=0.02)
        assert "brute force" in err

    def test_oracle_too_large(self, capsys, tmp_path):
        code, _, _ = run(capsys, tmp_path, "rate", "--network", "J3", "--K", "1", "--oracle")
        assert code == EXIT_VALIDATION

    def test_sweep_csv(self, capsys, tmp_path):
        code, out, _ = run(capsys, tmp_path, "--format", "csv", "rate", "--network", "J1", "--point", "1",
                           "--sweep=-1:1:3")
        assert code == EXIT_OK
        lines = out.splitlines()
        assert lines[0].startswith("# manifest: ")
        assert lines[1] == "beta1,L,status"
        assert len(lines) == 2 + 3
        assert (tmp_path / "rate.csv").read_text(encoding="utf-8") == out

    def test_uniqueness_bound(self, capsys, tmp_path):
        code, result, _ = run_json(capsys, tmp_path, "rate", "--network", "J2", "--point", "1,1",
                                   "--beta", "0,0", "--beta-prime", "0.1,0")
        assert code == EXIT_OK
        assert result["uniqueness"]["passed"]

    def test_bad_node_index(self, capsys, tmp_path):
        code, _, _ = run(capsys, tmp_path, "rate", "--network", "J2", "--K", "3")
        assert code == EXIT_VALIDATION

    def test_beta_dimension(self, capsys, tmp_path):
        code, _, _ = run(capsys, tmp_path, "rate", "--network", "J2", "--K", "1", "--beta", "0")
        assert code == EXIT_VALIDATION

    def test_deterministic_artifacts(self, capsys, tmp_path):
        first, second = tmp_path / "a", tmp_path / "b"
        argv = ("rate", "--network", "P2", "--K", "1", "--beta", "0,0.3")
        assert run(capsys, first, *argv)[0] == EXIT_OK
        assert run(capsys, second, *argv)[0] == EXIT_OK
        assert (first / "rate.json").read_bytes() == (second / "rate.json").read_bytes()

    def test_json_reserializes_identically(self, capsys, tmp_path):
        run(capsys, tmp_path, "rate", "--network", "J2", "--point", "0,0", "--beta", "0,0")
        text = (tmp_path / "rate.json").read_text(encoding="utf-8")
        assert dumps_json(json.loads(text)) == text

    def test_artifacts_carry_manifest(self, capsys, tmp_path):
        code, result, _ = run_json(capsys, tmp_path, "rate", "--network", "J1", "--point", "0")
        manifest = json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))
        assert result["manifest"] == manifest["digest"]
        assert manifest["command"] == "rate"
        assert str(tmp_path / "rate.json") in manifest["outputs"]


class TestPathRate:
    """path-rate command."""

    def test_lln_path_is_free(self, capsys, tmp_path, path_file):
        path = path_file([[0.0, [1.0]], [1.0, [4.0]]])
        code, result, _ = run_json(capsys, tmp_path, "path-rate", "--network", "J1", "--path", path)
        assert code == EXIT_OK
        assert result["value"] == pytest.approx(0.0, abs=1e-8)
        assert len(result["segments"]) == 1

    def test_segments_csv(self, capsys, tmp_path, path_file):
        path = path_file([[0.0, [0.0]], [0.5, [0.0]], [1.0, [1.5]]])
        code, result, _ = run_json(capsys, tmp_path, "path-rate", "--network", "J1", "--path", path)
        assert code == EXIT_OK
        assert [s["K"] for s in result["segments"]] == [[1], []]
        assert result["value"] == pytest.approx(0.5 * 1.0, abs=1e-8)
        rows = (tmp_path / "path-rate.csv").read_text(encoding="utf-8").splitlines()
        assert rows[1] == "t0,t1,K,beta1,L"
        assert len(rows) == 4

    def test_path_leaves_orthant(self, capsys, tmp_path, path_file):
        path = path_file([[0.0, [0.0]], [1.0, [-1.0]]])
        code, _, _ = run(capsys, tmp_path, "path-rate", "--network", "J1", "--path", path)
        assert code == EXIT_VALIDATION

    def test_malformed_path_file(self, capsys, tmp_path, path_file):
        path = path_file([[0.0, "zero"], [1.0, [1.0]]])
        code, _, err = run(capsys, tmp_path, "path-rate", "--network", "J1", "--path", path)
        assert code == EXIT_IO
        assert "Malformed path" in err


class TestSkorokhodCommands:
    """sp and sp-check commands."""

    def test_sp_check_jackson(self, capsys, tmp_path):
        code, result, _ = run_json(capsys, tmp_path, "sp-check", "--network", "J2", "--tilt", "unit")
        assert code == EXIT_OK
        assert result["spectral_radius"] == pytest.approx(0.5, abs=1e-8)
        assert result["regular"]
        assert result["condition4"]["passed"]
        assert all(entry["regular"] for entry in result["localized"])

    def test_sp_check_processor_sharing(self, capsys, tmp_path):
        code, result, _ = run_json(capsys, tmp_path, "sp-check", "--network", "P2", "--beta", "0,0")
        assert code == EXIT_OK
        assert not result["applicable"]
        assert result["canonical_transform"]
        assert result["lln_direction_admissible"]

    def test_explicit_tilt_file(self, capsys, tmp_path):
        tilt = tmp_path / "tilt.json"
        tilt.write_text(json.dumps({"e1": 1, "e2": 1, "-e1": 1, "-e2": 1, "e1>2": 3, "e2>1": 1}),
                        encoding="utf-8")
        code, result, _ = run_json(capsys, tmp_path, "sp-check", "--network", "J2", "--tilt", str(tilt))
        assert code == EXIT_OK
        assert result["q_matrix"][0][1] == pytest.approx(0.75)

    def test_sp_lln_path(self, capsys, tmp_path, path_file):
        path = path_file([[0.0, [0.0, 0.0]], [1.0, [-0.2, -0.2]]])
        code, result, _ = run_json(capsys, tmp_path, "sp", "--network", "J2", "--path", path, "--dt", "0.01")
        assert code == EXIT_OK
        assert result["verified"]
        assert result["steps"] == 100
        assert result["max_abs_phi"] <= 1e-3
        rows = (tmp_path / "sp.csv").read_text(encoding="utf-8").splitlines()
        assert rows[1] == "t,phi1,phi2,eta1,eta2"
        assert len(rows) == 2 + 101


class TestSimulationCommands:
    """dump-local, simulate and occupancy commands."""

    def test_dump_local(self, capsys, tmp_path):
        code, out, _ = run(capsys, tmp_path, "--format", "csv", "dump-local", "--network", "J2", "--K", "1")
        assert code == EXIT_OK
        lines = out.splitlines()
        assert lines[1] == "mask,facet,direction,rate"
        assert len(lines) == 2 + 2 * 6

    def test_simulate_naive(self, capsys, tmp_path):
        code, result, _ = run_json(capsys, tmp_path, "simulate", "--network", "J1s", "--K", "1", "--beta", "0",
                                   "--epsilon", "0.5", "--n", "10,20", "--reps", "50")
        assert code == EXIT_OK
        assert result["tilt"] is None
        assert [e["n"] for e in result["estimates"]] == [10, 20]
        assert result["L"] == pytest.approx(0.0, abs=1e-8)

    def test_simulate_threads_do_not_change_output(self, capsys, tmp_path):
        argv = ("simulate", "--network", "J1s", "--K", "1", "--epsilon", "0.3", "--n", "20", "--reps", "40",
                "--tilt", "unit")
        main(["-o", str(tmp_path / "a"), "--threads", "1", *argv])
        main(["-o", str(tmp_path / "b"), "--threads", "3", *argv])
        capsys.readouterr()
        assert (tmp_path / "a" / "simulate.json").read_bytes() == (tmp_path / "b" / "simulate.json").read_bytes()

    def test_simulate_seed_changes_output(self, capsys, tmp_path):
        argv = ("simulate", "--network", "J1s", "--K", "1", "--epsilon", "0.1", "--n", "20", "--reps", "200")
        _, first, _ = run_json(capsys, tmp_path / "a", "--seed", "1", *argv)
        _, second, _ = run_json(capsys, tmp_path / "b", "--seed", "2", *argv)
        assert first["manifest"] != second["manifest"]

    def test_occupancy(self, capsys, tmp_path):
        code, result, _ = run_json(capsys, tmp_path, "occupancy", "--network", "J1s", "--K", "1",
                                   "--n", "100", "--reps", "100")
        assert code == EXIT_OK
        assert sum(result["rho_hat"].values()) == pytest.approx(1.0, abs=1e-12)
        assert 0.65 <= result["rho_hat"]["{1}"] <= 0.85


class TestReport:
    """report command."""

    def test_empty_scenario(self, capsys, tmp_path, scenario):
        code, bundle, _ = run_json(capsys, tmp_path / "out", "report", "--scenario", scenario([]))
        assert code == EXIT_OK
        assert bundle["tasks"] == []
        assert bundle["cross_checks"] == []
        assert (tmp_path / "out" / "bundle.json").exists()

    def test_missing_spec_is_per_task(self, capsys, tmp_path, scenario):
        tasks = [
            {"task": "rate", "args": {"network": "J1", "point": [0], "beta": [0]}},
            {"task": "rate", "args": {"network": str(tmp_path / "missing.json")}},
        ]
        code, bundle, _ = run_json(capsys, tmp_path / "out", "report", "--scenario", scenario(tasks))
        assert code == EXIT_IO
        first, second = bundle["tasks"]
        assert first["status"] == "ok"
        assert first["result"]["value"] == pytest.approx(1.0, abs=1e-8)
        assert second["status"] == "error"
        assert second["exit_code"] == EXIT_IO
        assert (tmp_path / "out" / "task_01_rate.json").exists()

    def test_unknown_task(self, capsys, tmp_path, scenario):
        code, bundle, _ = run_json(capsys, tmp_path / "out", "report",
                                   "--scenario", scenario([{"task": "bogus"}]))
        assert code == EXIT_VALIDATION
        assert "Unknown task" in bundle["tasks"][0]["error"]

    def test_default_network(self, capsys, tmp_path, scenario):
        tasks = {"tasks": [{"task": "validate"}, {"task": "sp-check", "args": {"tilt": "unit"}}]}
        code, bundle, _ = run_json(capsys, tmp_path / "out", "--threads", "2", "report",
                                   "--network", "J2", "--scenario", scenario(tasks), "--pdf")
        assert code == EXIT_OK
        assert [t["status"] for t in bundle["tasks"]] == ["ok", "ok"]
        assert (tmp_path / "out" / "summary.pdf").exists()

    def test_malformed_scenario(self, capsys, tmp_path, scenario):
        code, _, _ = run(capsys, tmp_path / "out", "report", "--scenario", scenario({"tasks": [{"args": {}}]}))
        assert code == EXIT_IO

    def test_cross_checks(self):
        entries = [
            {"task": "rate", "status": "ok", "result": {"value": 1.0}},
            {"task": "simulate", "status": "ok",
             "result": {"L": 1.0, "estimates": [{"n": 40, "q_hat": 0.95}, {"n": 80, "q_hat": float("inf")}]}},
        ]
        checks = cross_checks(entries)
        assert checks[0]["within_band"]
        assert checks[0]["task_index"] == 2
        assert checks[1]["ratio"] is None
        assert not checks[1]["within_band"]

    @pytest.mark.slow
    def test_mm1_verify(self, capsys, tmp_path):
        scenario_path = str(PROJECT_ROOT / "scenarios" / "mm1_verify.json")
        code, bundle, _ = run_json(capsys, tmp_path, "--threads", "4", "report", "--scenario", scenario_path)
        assert code == EXIT_OK
        assert bundle["tasks"][0]["result"]["value"] == pytest.approx(1.0, abs=1e-8)
        (check,) = bundle["cross_checks"]
        assert check["within_band"]
        assert 0.7 <= check["q_hat"] <= 1.3
