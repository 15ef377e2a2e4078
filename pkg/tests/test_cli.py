from __future__ import annotations

import json

import pytest
import yaml

from fluxsync.artifacts import read_csv
from fluxsync.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, main


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["run", "loadstep_bus9.scn", "--t-end", "0.02", "--out", str(out)])
    assert code == EXIT_OK
    return out


class TestRun:
    def test_writes_csv_and_metrics(self, run_dir):
        channels, units, meta = read_csv(run_dir / "timeseries.csv")
        assert channels["time_s"][-1] == pytest.approx(0.02)
        assert units["WPG1.v_dc"] == "V"
        assert meta["status"] == "completed"
        report = json.loads((run_dir / "metrics.json").read_text())
        assert report["completed"] is True
        assert report["config_sha256"] == meta["config_sha256"]

    def test_overrides_reach_the_config(self, tmp_path):
        code = main(["run", "loadstep_bus9.scn", "--t-end", "0.01", "--dt", "2e-5",
                     "--controller", "avscm", "--out", str(tmp_path)])
        assert code == EXIT_OK
        cfg = json.loads((tmp_path / "metrics.json").read_text())["config"]
        assert cfg["sim"]["dt"] == 2e-5
        assert {w["controller"] for w in cfg["wpgs"].values()} == {"avscm"}

    def test_invalid_scenario_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.scn"
        bad.write_text(yaml.safe_dump({"wpgs": {"WPG1": {"bus": "99"}}}))
        assert main(["run", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        assert "unknown bus 99" in capsys.readouterr().err

    @pytest.mark.parametrize("argv", [
        ["run", "loadstep_bus9.scn", "--dt", "-1"],
        ["run", "loadstep_bus9.scn", "--controller", "pid"],
        ["frobnicate"],
    ])
    def test_usage_errors_exit_2(self, argv):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == EXIT_CONFIG

    def test_unwritable_out_exits_2(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main(["run", "loadstep_bus9.scn", "--t-end", "0.01",
                     "--out", str(blocker / "sub")]) == EXIT_CONFIG


class TestCompare:
    def test_self_compare_is_zero(self, run_dir, tmp_path, capsys):
        out = tmp_path / "cmp.json"
        assert main(["compare", str(run_dir), str(run_dir), "--out", str(out)]) == EXIT_OK
        res = json.loads(out.read_text())
        assert res["same_time_grid"]
        assert all(d["max_abs"] == 0.0 for d in res["channels"].values())
        assert "WPG1.v_dc" in capsys.readouterr().out

    def test_missing_run_exits_2(self, run_dir, tmp_path):
        assert main(["compare", str(run_dir), str(tmp_path / "none")]) == EXIT_CONFIG


class TestValidate:
    def test_bundled_ok(self, capsys):
        assert main(["validate", "loadstep_bus9.scn", "energize_fault_bus5.scn"]) == EXIT_OK
        assert capsys.readouterr().out.count(": ok") == 2

    def test_lists_every_problem(self, tmp_path, capsys):
        bad = tmp_path / "bad.scn"
        bad.write_text(yaml.safe_dump({
            "wpgs": {"WPG1": {"bus": "99", "colour": "red"}},
            "events": [{"time": 1.0, "kind": "load_step", "bus": "42", "p_mw": 1.0}]}))
        assert main(["validate", str(bad)]) == EXIT_CONFIG
        out = capsys.readouterr().out
        assert "unknown bus 99" in out and "unknown bus 42" in out and "colour" in out


class TestAcceptanceVerb:
    def test_subset_passes(self, tmp_path, capsys):
        out = tmp_path / "acc.json"
        assert main(["acceptance", "--only", "1", "2", "--out", str(out)]) == EXIT_OK
        text = capsys.readouterr().out
        assert "[PASS]  1." in text and "[PASS]  2." in text and "2/2 criteria passed" in text
        assert [r["number"] for r in json.loads(out.read_text())] == [1, 2]

    def test_unknown_criterion_exits_2(self):
        assert main(["acceptance", "--only", "11"]) == EXIT_CONFIG

    def test_failing_criterion_exits_1(self, monkeypatch):
        from fluxsync import acceptance

        fail = acceptance.CriterionResult(2, "forced", False, "x", "y")
        monkeypatch.setitem(acceptance.CRITERIA, 2, lambda runs: fail)
        assert main(["acceptance", "--only", "2"]) == EXIT_FAIL
