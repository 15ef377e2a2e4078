"""Scenario files: strict validation, merging over the default profile.

A scenario file is YAML with the same layout as ``scenarios/defaults.yaml``
and only states what differs from it.  Mappings are merged recursively,
lists replace.  Every generator block is merged over ``wpg_defaults``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from importlib import resources
from pathlib import Path

import jsonschema
import yaml

log = logging.getLogger(__name__)

BUNDLED = ("loadstep_bus9.scn", "energize_fault_bus5.scn")


class ConfigError(ValueError):
    """Invalid scenario; ``errors`` lists every problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


# ------------------------------------------------------------------ schema
_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_BUS = {"type": ["string", "integer"]}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


_WPG_PROPS = {
    "bus": _BUS,
    "hv_bus": _BUS,
    "controller": {"enum": ["nfscm", "avscm"]},
    "p_mw": _NONNEG,
    "energized": {"type": "boolean"},
    "breaker_closed": {"type": "boolean"},
    "residual_flux": {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3},
    "filter": _obj({"l_f": _POS, "r_f": _NONNEG, "r_f2": _NONNEG, "c_f": _POS}),
    "dc_link": _obj({"c": _POS, "v_nom": _POS}),
    "machine": _obj({"time_constant": _POS, "p_max_mw": _NONNEG}),
    "storage": _obj({"l_boost": _POS, "duty": {"type": "number", "minimum": 0, "maximum": 0.95},
                     "p_rating_mw": _NONNEG, "k_p": _POS}),
    "governor": _obj({"enabled": {"type": "boolean"}, "k_pg1": _NONNEG, "k_pg2": _NONNEG,
                      "k_pg3": _NONNEG, "tau_d": _POS}),
    "control": _obj({"v_t_ref": _POS, "k_i": _NUM, "k_e": _NONNEG, "band": _POS,
                     "t_d": _POS, "z_v": _POS, "gamma": _POS, "tau": _POS, "phi": _POS, "psi_min": _POS,
                     "psi_max": _POS, "lbfc": {"type": "boolean"}}),
}

_EVENT = {
    "type": "object",
    "properties": {
        "time": _NONNEG,
        "kind": {"enum": ["load_step", "fault_on", "fault_off", "breaker_close",
                          "setpoint_change"]},
        "bus": _BUS,
        "p_mw": _NUM,
        "wpg": {"type": "string"},
        "r_on": _POS,
    },
    "required": ["time", "kind"],
    "additionalProperties": False,
    "allOf": [
        {"if": {"properties": {"kind": {"const": "load_step"}}},
         "then": {"required": ["bus", "p_mw"]}},
        {"if": {"properties": {"kind": {"enum": ["fault_on", "fault_off"]}}},
         "then": {"required": ["bus"]}},
        {"if": {"properties": {"kind": {"const": "breaker_close"}}},
         "then": {"required": ["wpg"]}},
        {"if": {"properties": {"kind": {"const": "setpoint_change"}}},
         "then": {"required": ["wpg", "p_mw"]}},
    ],
}

SCHEMA = _obj({
    "name": {"type": "string"},
    "description": {"type": "string"},
    "base": _obj({"s_base": _POS, "v_base_ac": _POS, "v_base_dc": _POS, "f_nom": _POS}),
    "sim": _obj({"dt": _POS, "t_end": _POS, "decimation": {"type": "integer", "minimum": 1}}),
    "init": _obj({"angle_offset_deg": _NUM, "slack": {"type": "string"},
                  "loads_at_initial_voltage": {"type": "boolean"}}),
    "record": _obj({"buses": {"type": "array", "items": _BUS}}),
    "network": _obj({
        "buses": {"type": "array", "items": _BUS, "minItems": 1},
        "lines": {"type": "object", "additionalProperties": _obj(
            {"from": _BUS, "to": _BUS, "r": _NONNEG, "x": _POS, "b": _NONNEG},
            ["from", "to", "r", "x"])},
        "loads": {"type": "object", "additionalProperties": _obj(
            {"bus": _BUS, "p_mw": _NONNEG, "q_mvar": _NUM}, ["bus", "p_mw"])},
        "transformer": _obj({"r": _NONNEG, "x": _POS, "l_m0": _POS, "psi_knee": _POS,
                             "l_ms": _POS}),
    }),
    "wpg_defaults": _obj(_WPG_PROPS),
    "wpgs": {"type": "object", "additionalProperties": _obj(_WPG_PROPS)},
    "events": {"type": "array", "items": _EVENT},
})


# ----------------------------------------------------------------- helpers
def deep_merge(base: dict, over: dict) -> dict:
    """Recursive merge; mappings merge, everything else replaces."""
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _leaves(d: dict, prefix=""):
    for k, v in d.items():
        if isinstance(v, dict):
            yield from _leaves(v, f"{prefix}{k}.")
        else:
            yield f"{prefix}{k}", v


def _has(d: dict, dotted: str) -> bool:
    for part in dotted.split("."):
        if not isinstance(d, dict) or part not in d:
            return False
        d = d[part]
    return True


def default_profile() -> dict:
    text = resources.files("fluxsync.scenarios").joinpath("defaults.yaml").read_text()
    return yaml.safe_load(text)


def bundled_path(name: str) -> Path:
    """Filesystem path of a bundled scenario file."""
    return Path(str(resources.files("fluxsync.scenarios").joinpath(name)))


def schema_errors(doc) -> list[str]:
    """Every schema violation of ``doc``, as readable strings."""
    v = jsonschema.Draft202012Validator(SCHEMA)
    out = []
    for err in sorted(v.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path))):
        where = "/".join(map(str, err.absolute_path)) or "<root>"
        out.append(f"{where}: {err.message}")
    return out


def _reference_errors(cfg: dict) -> list[str]:
    errs = []
    buses = {str(b) for b in cfg["network"]["buses"]}
    if len(buses) != len(cfg["network"]["buses"]):
        errs.append("network/buses: duplicate bus names")
    for name, ln in cfg["network"]["lines"].items():
        for end in ("from", "to"):
            if str(ln[end]) not in buses:
                errs.append(f"network/lines/{name}/{end}: unknown bus {ln[end]}")
    for name, ld in cfg["network"]["loads"].items():
        if str(ld["bus"]) not in buses:
            errs.append(f"network/loads/{name}/bus: unknown bus {ld['bus']}")
    for g, w in cfg["wpgs"].items():
        for key in ("bus", "hv_bus"):
            if key not in w:
                errs.append(f"wpgs/{g}: missing {key}")
            elif str(w[key]) not in buses:
                errs.append(f"wpgs/{g}/{key}: unknown bus {w[key]}")
        c = w.get("control", {})
        if c.get("psi_min", 0) >= c.get("psi_max", 1):
            errs.append(f"wpgs/{g}/control: psi_min must be below psi_max")
    for b in cfg.get("record", {}).get("buses", []):
        if str(b) not in buses:
            errs.append(f"record/buses: unknown bus {b}")
    slack = cfg["init"]["slack"]
    if slack not in cfg["wpgs"]:
        errs.append(f"init/slack: unknown generator {slack}")
    elif not cfg["wpgs"][slack].get("energized", True):
        errs.append(f"init/slack: {slack} must be energized")
    closes = {}
    for k, ev in enumerate(cfg["events"]):
        if "bus" in ev and str(ev["bus"]) not in buses:
            errs.append(f"events/{k}/bus: unknown bus {ev['bus']}")
        if "wpg" in ev:
            g = ev["wpg"]
            if g not in cfg["wpgs"]:
                errs.append(f"events/{k}/wpg: unknown generator {g}")
            elif ev["kind"] == "breaker_close":
                if cfg["wpgs"][g].get("breaker_closed", True):
                    errs.append(f"events/{k}: breaker of {g} is already closed")
                closes[g] = closes.get(g, 0) + 1
        if ev["kind"] == "load_step" and not ev["p_mw"] > 0:
            errs.append(f"events/{k}/p_mw: load step must be positive")
    for g, count in closes.items():
        if count > 1:
            errs.append(f"events: breaker of {g} closed more than once")
    for g, w in cfg["wpgs"].items():
        if not w.get("energized", True) and w.get("breaker_closed", True):
            errs.append(f"wpgs/{g}: a de-energized unit needs breaker_closed: false")
    on = [e for e in cfg["events"] if e["kind"] == "fault_on"]
    for e in on:
        offs = [f for f in cfg["events"]
                if f["kind"] == "fault_off" and str(f["bus"]) == str(e["bus"])]
        if len(offs) > 1 or len([x for x in on if str(x["bus"]) == str(e["bus"])]) > 1:
            errs.append(f"events: at most one fault interval per bus ({e['bus']})")
        elif offs and not offs[0]["time"] > e["time"]:
            errs.append(f"events: fault at bus {e['bus']} clears before it starts")
    return errs


# -------------------------------------------------------------------- API
def resolve(doc: dict | None) -> dict:
    """Validate a scenario mapping and merge it over the default profile.

    Raises
    ------
    ConfigError
        With every schema and reference problem found.
    """
    doc = {} if doc is None else doc
    if not isinstance(doc, dict):
        raise ConfigError(["<root>: scenario must be a mapping"])
    first = schema_errors(doc)
    try:
        cfg = _merge(doc)
    except (TypeError, AttributeError, KeyError):
        raise ConfigError(first or ["<root>: cannot merge over the default profile"]) from None
    errs = first + [e for e in schema_errors(cfg) if e not in first]
    try:
        errs += _reference_errors(cfg)
    except (TypeError, AttributeError, KeyError) as exc:
        if not errs:
            errs.append(f"<root>: incomplete configuration ({exc})")
    if errs:
        raise ConfigError(errs)
    return cfg


def _merge(doc: dict) -> dict:
    defaults = default_profile()
    cfg = deep_merge(defaults, {k: v for k, v in doc.items() if k != "wpgs"})
    wdef = cfg.pop("wpg_defaults")
    wpgs_in = doc.get("wpgs", {})
    merged = {}
    for g in list(defaults["wpgs"]) + [g for g in wpgs_in if g not in defaults["wpgs"]]:
        own = deep_merge(defaults["wpgs"].get(g, {}), wpgs_in.get(g, {}))
        for key, value in _leaves(wdef):
            if not _has(own, key):
                log.debug("%s.%s not set, using default %r", g, key, value)
        merged[g] = deep_merge(wdef, own)
    cfg["wpgs"] = merged
    cfg["wpg_defaults"] = wdef
    for key, value in _leaves(defaults["sim"]):
        if not _has(doc.get("sim", {}), key):
            log.debug("sim.%s not set, using default %r", key, value)
    cfg.setdefault("record", {"buses": ["7", "9"]})
    return cfg


def load_config(path) -> dict:
    """Read, validate and resolve a scenario file.

    Bundled scenario names (e.g. ``loadstep_bus9.scn``) are found even when
    no such file exists in the working directory.
    """
    p = Path(path)
    if not p.exists() and p.name == str(path) and p.name in BUNDLED:
        p = bundled_path(p.name)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror or exc}"]) from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not well-formed: {exc}"]) from None
    return resolve(doc)


def apply_overrides(cfg: dict, dt=None, t_end=None, controller=None) -> dict:
    """Copy of ``cfg`` with command-line overrides applied and re-validated."""
    cfg = copy.deepcopy(cfg)
    if dt is not None:
        cfg["sim"]["dt"] = float(dt)
    if t_end is not None:
        cfg["sim"]["t_end"] = float(t_end)
    if controller is not None:
        for w in cfg["wpgs"].values():
            w["controller"] = controller
    errs = schema_errors(cfg)
    if errs:
        raise ConfigError(errs)
    return cfg


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON form of a resolved configuration."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def scenario_events(cfg: dict):
    """Engine events of a resolved configuration, in file order."""
    from .engine import ScenarioEvent

    out = []
    for k, ev in enumerate(cfg["events"]):
        payload = {key: v for key, v in ev.items() if key not in ("time", "kind")}
        out.append(ScenarioEvent(float(ev["time"]), ev["kind"], payload, k))
    return out
