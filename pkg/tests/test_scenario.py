from __future__ import annotations

import copy
import logging

import pytest
import yaml

from fluxsync.scenario import (
    ConfigError,
    apply_overrides,
    bundled_path,
    config_hash,
    deep_merge,
    load_config,
    resolve,
    scenario_events,
)


class TestBundledScenarios:
    def test_loadstep(self, loadstep_cfg):
        (ev,) = loadstep_cfg["events"]
        assert ev == {"time": 2.0, "kind": "load_step", "bus": "9", "p_mw": 400.0}
        assert {w["control"]["k_i"] for w in loadstep_cfg["wpgs"].values()} == {10.0}

    def test_energize(self, energize_cfg):
        w1 = energize_cfg["wpgs"]["WPG1"]
        assert w1["residual_flux"] == [1.0, -1.0, 1.0]
        kinds = [(e["kind"], e["time"]) for e in energize_cfg["events"]]
        assert ("breaker_close", 0.5) in kinds
        assert ("fault_on", 3.1) in kinds
        assert ("fault_off", 3.18333) in kinds

    def test_fault_interval_is_five_cycles(self, energize_cfg):
        t = {e["kind"]: e["time"] for e in energize_cfg["events"]}
        assert t["fault_off"] - t["fault_on"] == pytest.approx(0.0833, abs=1e-4)

    def test_defaults_reproduce_parameter_table(self, loadstep_cfg):
        cfg = loadstep_cfg
        assert cfg["base"] == {"s_base": 889e6, "v_base_ac": 575.0, "v_base_dc": 1110.0,
                               "f_nom": 60.0}
        w = cfg["wpgs"]["WPG2"]
        assert w["filter"]["l_f"] == 0.15 and w["filter"]["r_f"] == 0.003
        assert w["dc_link"] == {"c": 540.0, "v_nom": 1110.0}
        assert w["machine"]["p_max_mw"] == 800.0
        assert w["storage"]["l_boost"] == 0.0012 and w["storage"]["duty"] == 0.19
        assert w["storage"]["p_rating_mw"] == 300.0
        g = w["governor"]
        assert (g["k_pg1"], g["k_pg2"], g["k_pg3"]) == (30.0, 15.0, 0.1)
        c = w["control"]
        assert (c["k_i"], c["k_e"], c["phi"], c["gamma"], c["tau"]) == (10.0, 0.2, 0.3, 1.75, 0.5)

    def test_roles(self, loadstep_cfg):
        w = loadstep_cfg["wpgs"]
        assert w["WPG3"]["governor"]["enabled"] is False
        assert loadstep_cfg["init"]["slack"] == "WPG3"
        assert [g for g in w if w[g]["control"]["lbfc"]] == ["WPG1"]

    def test_bundled_path_exists(self):
        assert bundled_path("loadstep_bus9.scn").is_file()


class TestValidation:
    def test_unknown_bus_is_named(self):
        with pytest.raises(ConfigError) as exc:
            resolve({"wpgs": {"WPG1": {"bus": "99"}}})
        assert any("unknown bus 99" in e for e in exc.value.errors)

    def test_all_problems_reported(self):
        doc = {"wpgs": {"WPG1": {"bus": "99", "colour": "red"}},
               "events": [{"time": 1.0, "kind": "load_step", "bus": "42", "p_mw": 5.0}],
               "sim": {"dt": -1.0}}
        with pytest.raises(ConfigError) as exc:
            resolve(doc)
        text = "\n".join(exc.value.errors)
        for needle in ("colour", "unknown bus 99", "unknown bus 42", "sim/dt"):
            assert needle in text
        assert len(exc.value.errors) >= 4

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="unexpected"):
            resolve({"sime": {}})

    @pytest.mark.parametrize("doc, needle", [
        ({"events": [{"time": 1.0, "kind": "explode"}]}, "explode"),
        ({"events": [{"time": 1.0, "kind": "load_step"}]}, "required"),
        ({"events": [{"time": 1.0, "kind": "breaker_close", "wpg": "WPG1"}]}, "already closed"),
        ({"events": [{"time": 2.0, "kind": "fault_on", "bus": "5"},
                     {"time": 1.0, "kind": "fault_off", "bus": "5"}]}, "clears before"),
        ({"init": {"slack": "WPG9"}}, "unknown generator"),
        ({"wpgs": {"WPG2": {"energized": False}}}, "breaker_closed"),
        ({"wpgs": {"WPG2": {"controller": "pid"}}}, "pid"),
        ({"wpgs": {"WPG2": {"control": {"psi_min": 2.0}}}}, "psi_min"),
    ])
    def test_rejections(self, doc, needle):
        with pytest.raises(ConfigError) as exc:
            resolve(doc)
        assert needle in "\n".join(exc.value.errors)

    def test_malformed_file(self, tmp_path):
        p = tmp_path / "x.scn"
        p.write_text(": [\n")
        with pytest.raises(ConfigError, match="not well-formed"):
            load_config(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.scn")

    def test_non_mapping(self):
        with pytest.raises(ConfigError):
            resolve([1, 2])


class TestResolution:
    def test_empty_document_is_the_default_profile(self):
        cfg = resolve({})
        assert set(cfg["wpgs"]) == {"WPG1", "WPG2", "WPG3", "WPG4"}
        assert cfg["events"] == []

    def test_defaults_are_logged(self, caplog):
        with caplog.at_level(logging.DEBUG, logger="fluxsync.scenario"):
            resolve({})
        assert any("using default" in r.message for r in caplog.records)

    def test_deep_merge_replaces_lists(self):
        assert deep_merge({"a": {"b": 1, "c": [1, 2]}}, {"a": {"c": [3]}}) == {"a": {"b": 1, "c": [3]}}

    def test_round_trip_through_yaml(self, loadstep_cfg, tmp_path):
        p = tmp_path / "copy.scn"
        doc = copy.deepcopy(loadstep_cfg)
        p.write_text(yaml.safe_dump(doc))
        assert config_hash(load_config(p)) == config_hash(loadstep_cfg)

    def test_overrides(self, loadstep_cfg):
        cfg = apply_overrides(loadstep_cfg, dt=5e-6, t_end=1.0, controller="avscm")
        assert cfg["sim"]["dt"] == 5e-6 and cfg["sim"]["t_end"] == 1.0
        assert {w["controller"] for w in cfg["wpgs"].values()} == {"avscm"}
        assert loadstep_cfg["sim"]["dt"] == 1e-5  # original untouched
        with pytest.raises(ConfigError):
            apply_overrides(loadstep_cfg, controller="vsg")

    def test_hash_is_stable_and_sensitive(self, loadstep_cfg):
        h = config_hash(loadstep_cfg)
        assert h == config_hash(copy.deepcopy(loadstep_cfg))
        assert h != config_hash(apply_overrides(loadstep_cfg, dt=5e-6))

    def test_events(self, energize_cfg):
        evs = scenario_events(energize_cfg)
        assert [e.kind for e in evs] == ["breaker_close", "fault_on", "fault_off"]
        assert evs[0].payload == {"wpg": "WPG1"}
        assert [e.index for e in evs] == [0, 1, 2]
