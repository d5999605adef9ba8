import csv
import hashlib
import json
import math
from pathlib import Path

import pytest

from feedersim import cli

from conftest import FIXTURES


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestExitCodes:
    def test_validate_fixture_ok(self, capsys):
        code, out, err = run_cli(capsys, "validate",
                                 str(FIXTURES / "synth-r1.json"))
        assert code == 0
        assert "120 houses" in out

    def test_missing_required_flag_is_usage_error(self, capsys):
        code, out, err = run_cli(capsys, "run")
        assert code == 1
        assert "feedersim: error: [usage]" in err
        assert "usage" in err.lower()

    def test_unknown_flag_rejected(self, capsys):
        code, out, err = run_cli(capsys, "validate", "--bogus", "x")
        assert code == 1

    def test_invalid_feeder_is_input_error(self, capsys, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{\"schema_version\": 1}")
        code, out, err = run_cli(capsys, "validate", str(bad))
        assert code == 2
        assert "feedersim: error: [input]" in err

    def test_missing_config_file_is_input_error(self, capsys, tmp_path):
        code, out, err = run_cli(capsys, "run", "--config",
                                 str(tmp_path / "none.json"))
        assert code == 2


class TestRun:
    def test_run_writes_artifacts(self, capsys, tmp_path):
        code, out, err = run_cli(capsys, "run", "--config",
                                 str(FIXTURES / "scenario-mini.json"),
                                 "--out", str(tmp_path / "run1"))
        assert code == 0, err
        assert (tmp_path / "run1" / "manifest.json").is_file()
        assert "regulation" in out

    def test_seed_override_changes_manifest(self, capsys, tmp_path):
        run_cli(capsys, "run", "--config", str(FIXTURES / "scenario-mini.json"),
                "--out", str(tmp_path / "a"), "--seed", "77")
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert manifest["seed"] == 77
        assert manifest["config"]["seed"] == 77

    def test_same_invocation_same_hashes(self, capsys, tmp_path):
        for sub in ("x", "y"):
            run_cli(capsys, "run", "--config",
                    str(FIXTURES / "scenario-mini.json"),
                    "--out", str(tmp_path / sub))
        for name in ("manifest.json", "series.csv", "transformers.csv"):
            ha = hashlib.sha256((tmp_path / "x" / name).read_bytes()).hexdigest()
            hb = hashlib.sha256((tmp_path / "y" / name).read_bytes()).hexdigest()
            assert ha == hb, name

    def test_output_env_var_default(self, capsys, tmp_path, monkeypatch):
        target = tmp_path / "from-env"
        monkeypatch.setenv(cli.OUTPUT_ENV_VAR, str(target))
        code, out, err = run_cli(capsys, "run", "--config",
                                 str(FIXTURES / "scenario-mini.json"))
        assert code == 0
        assert (target / "manifest.json").is_file()


class TestFindPeakAndPopulate:
    def test_find_peak_prints_hour(self, capsys):
        code, out, err = run_cli(capsys, "find-peak",
                                 "--feeder", str(FIXTURES / "synth-mini.json"),
                                 "--weather", str(FIXTURES / "weather-2day.csv"))
        assert code == 0
        assert "peak hour" in out

    def test_populate_roundtrip(self, capsys, tmp_path):
        # strip houses from the mini fixture to get a skeleton
        doc = json.loads((FIXTURES / "synth-mini.json").read_text())
        doc["houses"] = []
        doc["zip_loads"] = []
        skeleton = tmp_path / "skeleton.json"
        skeleton.write_text(json.dumps(doc))
        out_file = tmp_path / "populated.json"
        code, out, err = run_cli(capsys, "populate", "--feeder", str(skeleton),
                                 "--target-peak", "60", "--seed", "5",
                                 "--out-file", str(out_file))
        assert code == 0, err
        assert out_file.is_file()
        code, out, err = run_cli(capsys, "validate", str(out_file))
        assert code == 0


class TestSensitivity:
    def test_matches_module_computation(self, capsys, tmp_path):
        out_file = tmp_path / "sens.csv"
        code, out, err = run_cli(capsys, "sensitivity", "--config",
                                 str(FIXTURES / "scenario-mini.json"),
                                 "--line", "LT1", "--pf", "0.97",
                                 "--out-file", str(out_file))
        assert code == 0, err
        with open(out_file, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1800
        from feedersim import powerflow as pf

        for row in rows[::300]:
            total = float(row["total"])
            assert total == pytest.approx(
                float(row["reactive_term"]) + float(row["real_term"])
                + float(row["source_term"]), rel=1e-6)
            assert float(row["source_term"]) == 0.0
            assert total < 0.0  # load increase sags the downstream bus

    def test_unknown_line_is_input_error(self, capsys):
        code, out, err = run_cli(capsys, "sensitivity", "--config",
                                 str(FIXTURES / "scenario-mini.json"),
                                 "--line", "NOPE")
        assert code == 2
