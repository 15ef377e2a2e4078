"""Glue between resolved configurations and the engine."""
from __future__ import annotations

from .engine import Simulation
from .scenario import scenario_events
from .system import build_system


def build_simulation(cfg: dict, controller: str | None = None) -> Simulation:
    """Engine at the initial operating point of a resolved configuration."""
    system = build_system(cfg, controller)
    return Simulation(system, scenario_events(cfg), decimation=int(cfg["sim"]["decimation"]),
                      record_buses=[str(b) for b in cfg.get("record", {}).get("buses", [])])


def run_config(cfg: dict, controller: str | None = None, t_end: float | None = None):
    """Build and run; returns ``(simulation, artifacts)``."""
    sim = build_simulation(cfg, controller)
    art = sim.run(float(cfg["sim"]["t_end"] if t_end is None else t_end))
    return sim, art
