"""Electromagnetic transient simulation of grid-forming wind power generators.

Four inverter-interfaced generators are connected to a two-area
transmission network through saturable step-up transformers.  Each unit
runs either a flux-synchronizing controller, with a latched funnel current
mode for faults, or an averaged-voltage baseline.

Typical use::

    from fluxsync import load_config, run_config

    cfg = load_config("loadstep_bus9.scn")
    sim, art = run_config(cfg)
    print(art.metrics["system"]["max_pairwise_v_dc_pu"])
"""
from __future__ import annotations

from .emcore import MetricNotReady, NumericalFault, PerUnitBase, ThreePhase
from .engine import ReferenceSimulation, RunArtifacts, ScenarioEvent, Simulation
from .metrics import compute_metrics
from .runner import build_simulation, run_config
from .scenario import ConfigError, apply_overrides, config_hash, load_config, resolve

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "MetricNotReady",
    "NumericalFault",
    "PerUnitBase",
    "ReferenceSimulation",
    "RunArtifacts",
    "ScenarioEvent",
    "Simulation",
    "ThreePhase",
    "apply_overrides",
    "build_simulation",
    "compute_metrics",
    "config_hash",
    "load_config",
    "resolve",
    "run_config",
]
