from __future__ import annotations

import copy

import pytest

from fluxsync.acceptance import RunCache, scenario_config
from fluxsync.scenario import load_config


@pytest.fixture(scope="session")
def runs() -> RunCache:
    """Scenario runs shared by every test that needs a full simulation."""
    return RunCache()


@pytest.fixture(scope="session")
def loadstep_cfg() -> dict:
    return load_config("loadstep_bus9.scn")


@pytest.fixture(scope="session")
def energize_cfg() -> dict:
    return load_config("energize_fault_bus5.scn")


def short_fault_config(controller: str = "nfscm") -> dict:
    """All units connected, a short bolted fault on bus 5 from 1 ms to 11 ms."""
    cfg = copy.deepcopy(scenario_config("energize_fault_bus5.scn", controller))
    w = cfg["wpgs"]["WPG1"]
    w.update(energized=True, breaker_closed=True, residual_flux=[0.0, 0.0, 0.0], p_mw=300.0)
    cfg["events"] = [{"time": 0.001, "kind": "fault_on", "bus": "5"},
                     {"time": 0.011, "kind": "fault_off", "bus": "5"}]
    return cfg
