"""Materialise a resolved scenario configuration into network, plants and controllers.

The initial operating point comes from a balanced phasor solution in which
every energised generator holds its PCC voltage magnitude set-point, with
the voltage leading the PCC flux by 90 degrees.  The slack unit's angle is
fixed; the others are solved so that their bridge output power matches the
dispatch.  All EMT states are then set from the phasors, which starts the
simulation in periodic steady state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import fsolve

from .controllers import AvscmController, ControllerParams, NfscmController
from .emcore import PerUnitBase
from .inverter import FilterParams
from .network import FaultElement, Network, NetworkConfigError, SaturableTransformer
from .plant import DcLinkState, GovernorState, MachineSideSurrogate, StorageBoost


@dataclass
class Wpg:
    """Everything belonging to one generator inside a running simulation."""

    name: str
    bus: str
    hv_bus: str
    filt: FilterParams
    dc: DcLinkState
    machine: MachineSideSurrogate
    storage: StorageBoost
    governor: GovernorState
    ctrl: object
    transformer: str
    source: str
    cap: str
    breaker: str | None
    p_e: float = 0.0

    @property
    def kind(self) -> str:
        return self.ctrl.kind


@dataclass
class System:
    base: PerUnitBase
    dt: float
    net: Network
    wpgs: list
    faults: dict = field(default_factory=dict)
    load_steps: dict = field(default_factory=dict)
    init: dict = field(default_factory=dict)


def _mw(x: float) -> float:
    return float(x) * 1e6


def build_network(cfg: dict, dt: float, load_scale: dict | None = None) -> tuple[Network, dict]:
    """Assemble the three-phase network; returns it with name bookkeeping.

    ``load_scale`` multiplies the admittance of the named loads (default 1).
    """
    load_scale = load_scale or {}
    base = PerUnitBase(**cfg["base"])
    s = base.s_base
    netcfg = cfg["network"]
    net = Network(dt, base.omega)
    for b in netcfg["buses"]:
        net.add_bus(str(b))
    for name, ln in netcfg["lines"].items():
        net.add_rl(name, str(ln["from"]), str(ln["to"]), ln["r"], ln["x"])
        b = float(ln.get("b", 0.0))
        if b > 0:
            # pi model: half the charging susceptance at each end
            net.add_rc(f"{name}.bf", str(ln["from"]), None, 0.0, 0.5 * b)
            net.add_rc(f"{name}.bt", str(ln["to"]), None, 0.0, 0.5 * b)
    for name, ld in netcfg["loads"].items():
        bus = str(ld["bus"])
        k = float(load_scale.get(name, 1.0))
        p = k * _mw(ld["p_mw"]) / s
        q = k * _mw(ld.get("q_mvar", 0.0)) / s
        if p > 0:
            net.add_resistor(f"{name}.p", bus, None, 1.0 / p)
        if q > 0:
            net.add_rl(f"{name}.q", bus, None, 0.0, 1.0 / q)
        elif q < 0:
            net.add_rc(f"{name}.q", bus, None, 0.0, -q)
    tcfg = netcfg["transformer"]
    names = {}
    for wname, w in cfg["wpgs"].items():
        bus, hv = str(w["bus"]), str(w["hv_bus"])
        if bus not in net.buses:
            raise NetworkConfigError(f"{wname} references unknown bus {bus}")
        if hv not in net.buses:
            raise NetworkConfigError(f"{wname} references unknown bus {hv}")
        f = w["filter"]
        src = f"{wname}.src"
        cap = f"{wname}.cap"
        net.add_source(src, bus, f["r_f"], f["l_f"], floating_neutral=True)
        net.add_rc(cap, bus, None, f["r_f2"], f["c_f"])
        tr_hv = hv
        breaker = None
        if not w.get("breaker_closed", True):
            tr_hv = f"{wname}.hv"
            net.add_bus(tr_hv)
            breaker = f"{wname}.brk"
        tr = SaturableTransformer(
            f"T{wname}", bus, tr_hv, r=tcfg["r"], l=tcfg["x"], l_m0=tcfg["l_m0"],
            psi_knee=tcfg["psi_knee"], l_ms=tcfg["l_ms"],
            residual_flux=tuple(w.get("residual_flux", (0.0, 0.0, 0.0))),
        )
        net.add_transformer(tr)
        if breaker:
            net.add_resistor(breaker, tr_hv, hv, 1e-4, closed=False)
        names[wname] = {"src": src, "cap": cap, "tr": tr.name, "breaker": breaker}
    faults = {}
    load_steps = {}
    for k, ev in enumerate(cfg.get("events", [])):
        kind = ev["kind"]
        if kind == "fault_on":
            bus = str(ev["bus"])
            off = [e for e in cfg["events"]
                   if e["kind"] == "fault_off" and str(e["bus"]) == bus]
            t_off = off[0]["time"] if off else math.inf
            fe = FaultElement(bus, ev["time"], t_off, ev.get("r_on", 1e-4))
            net.add_fault(fe)
            faults[bus] = fe
        elif kind == "load_step":
            name = f"step{k}_{ev['bus']}"
            net.add_resistor(name, str(ev["bus"]), None, s / _mw(ev["p_mw"]), closed=False)
            load_steps[k] = name
    net.finalize()
    return net, {"wpgs": names, "faults": faults, "load_steps": load_steps}


def power_flow(net: Network, pcc: dict, targets: dict, slack: str,
               angle_offset: float = 0.0, filters: dict | None = None,
               magnitudes: dict | None = None):
    """Phasor operating point with fixed PCC voltage magnitudes.

    Parameters
    ----------
    pcc : dict
        Generator name -> PCC bus, energised units only.
    targets : dict
        Generator name -> bridge output power in p.u. (slack ignored).
    filters : dict
        Generator name -> ``(r_f, l_f)`` series filter impedance.
    magnitudes : dict, optional
        Generator name -> PCC voltage magnitude (p.u.), default 1.

    Returns
    -------
    dict with ``V`` (bus -> complex), ``I`` (gen -> source current),
    ``E`` (gen -> bridge voltage) and ``P`` (gen -> bridge power).
    """
    Y, grid = net.phasor_admittance()
    idx = {b: k for k, b in enumerate(grid)}
    fixed = sorted({idx[b] for b in pcc.values()})
    # every PCC of a de-energised unit sits at zero
    energised_pcc = {idx[b] for b in pcc.values()}
    free = [k for k in range(len(grid)) if k not in energised_pcc]
    Yff = Y[np.ix_(free, free)]
    Yfp = Y[np.ix_(free, fixed)]
    gens = [g for g in pcc if g != slack]
    mags = {g: 1.0 for g in pcc}
    mags.update(magnitudes or {})

    def solve(delta):
        ang = dict(zip(gens, delta))
        ang[slack] = 0.0
        vp = np.array([mags[g] * 1j * np.exp(1j * (ang[g] + angle_offset))
                       for b in fixed for g in pcc if idx[pcc[g]] == b])
        vf = np.linalg.solve(Yff, -Yfp @ vp) if free else np.zeros(0)
        V = np.zeros(len(grid), dtype=complex)
        V[free] = vf
        V[fixed] = vp
        inj = Y @ V
        out_i, out_e, out_p = {}, {}, {}
        for g, b in pcc.items():
            i = inj[idx[b]]
            r, l = filters[g]
            e = V[idx[b]] + complex(r, l) * i
            out_i[g], out_e[g] = i, e
            out_p[g] = (e * i.conjugate()).real
        return V, out_i, out_e, out_p

    def resid(delta):
        _, _, _, p = solve(delta)
        return [p[g] - targets[g] for g in gens]

    delta0 = np.zeros(len(gens))
    sol, info, ier, msg = fsolve(resid, delta0, full_output=True, xtol=1e-13)
    if ier != 1 or max(abs(x) for x in resid(sol)) > 1e-8:
        raise NetworkConfigError(f"power flow did not converge: {msg}")
    V, I, E, P = solve(sol)
    return {"V": {b: V[k] for b, k in idx.items()}, "I": I, "E": E, "P": P}


def build_system(cfg: dict, controller: str | None = None) -> System:
    """Create the network, plants and controllers at the initial operating point."""
    base = PerUnitBase(**cfg["base"])
    dt = float(cfg["sim"]["dt"])
    wcfg = cfg["wpgs"]
    energised = {g: str(w["bus"]) for g, w in wcfg.items() if w.get("energized", True)}
    slack = cfg["init"]["slack"]
    if slack not in energised:
        raise NetworkConfigError(f"slack unit {slack} must exist and be energised")
    targets = {g: _mw(wcfg[g]["p_mw"]) / base.s_base for g in energised}
    filters = {g: (wcfg[g]["filter"]["r_f"], wcfg[g]["filter"]["l_f"]) for g in energised}
    offset = math.radians(cfg["init"].get("angle_offset_deg", 0.0))
    v_set = {g: float(wcfg[g]["control"].get("v_t_ref", 1.0)) for g in wcfg}
    mags = {g: v_set[g] for g in energised}
    loads = cfg["network"]["loads"]
    scale = {name: 1.0 for name in loads}
    for _ in range(50):
        net, names = build_network(cfg, dt, scale)
        pf = power_flow(net, energised, targets, slack, offset, filters, mags)
        if not cfg["init"].get("loads_at_initial_voltage", False):
            break
        # admittances that draw the stated powers at the solved voltages
        new = {name: 1.0 / abs(pf["V"][str(ld["bus"])]) ** 2 for name, ld in loads.items()}
        done = max(abs(new[n] - scale[n]) for n in loads) < 1e-12 if loads else True
        scale = new
        if done:
            break
    else:
        raise NetworkConfigError("load admittance iteration did not converge")
    net.set_phasor_state(pf["V"], {names["wpgs"][g]["src"]: pf["I"][g] for g in energised})

    wpgs = []
    for g, w in wcfg.items():
        nm = names["wpgs"][g]
        on = g in energised
        tr = net.transformers[nm["tr"]]
        if not on and any(tr.residual_flux):
            net.set_flux(nm["tr"], tr.consistent_flux(tr.residual_flux))
        dc_cfg, st_cfg, gv_cfg = w["dc_link"], w["storage"], w["governor"]
        v_nom = float(dc_cfg["v_nom"])
        p_e = pf["P"][g] * base.s_base if on else 0.0
        p_max = _mw(w["machine"]["p_max_mw"])
        p_in = min(max(p_e, 0.0), p_max)
        i_s = (p_e - p_in) / v_nom
        gov = GovernorState(
            k_pg1=gv_cfg["k_pg1"], k_pg2=gv_cfg["k_pg2"], k_pg3=gv_cfg["k_pg3"],
            tau_d=gv_cfg["tau_d"], s_base=base.s_base, v_dc_nom=v_nom,
            p_rating=_mw(st_cfg["p_rating_mw"]), enabled=bool(gv_cfg["enabled"]),
        )
        if i_s and not gov.enabled:
            raise NetworkConfigError(
                f"{g}: dispatch above the machine rating needs a governor-driven storage")
        if i_s and gov.k_pg3 > 0:
            # integral pre-loaded so storage carries the excess in steady state
            gov = GovernorState(**{**gov.__dict__,
                                   "integral": -i_s * v_nom / (base.s_base * gov.k_pg3)})
        storage = StorageBoost(
            l_boost=st_cfg["l_boost"], i_s=i_s, duty=st_cfg["duty"],
            v_storage=(1.0 - st_cfg["duty"]) * v_nom,
            p_rating=_mw(st_cfg["p_rating_mw"]), k_p=st_cfg["k_p"],
        )
        machine = MachineSideSurrogate(p_in=p_in, p_in_ref=p_in,
                                       time_constant=w["machine"]["time_constant"],
                                       p_max=p_max)
        dc = DcLinkState(v_dc=v_nom, c=dc_cfg["c"], p_me=p_in + i_s * v_nom, p_e=p_e, i_s=i_s)
        filt = FilterParams(**w["filter"])
        cp = ControllerParams(**{k: v for k, v in w["control"].items() if k != "v_t_ref"})
        kind = (controller or w["controller"]).lower()
        bus_v = pf["V"][str(w["bus"])] if on else 0.0
        if on:
            psi_vec = bus_v / 1j
            theta0 = math.atan2(psi_vec.imag, psi_vec.real)
        else:
            # start in phase with the flux at the bus the unit will connect to
            hv = pf["V"][str(w["hv_bus"])] / 1j
            theta0 = math.atan2(hv.imag, hv.real)
        # flux and voltage share the same per-unit value at nominal speed
        v_t_ref = v_set[g]
        psi_nom = v_t_ref
        if kind == "nfscm":
            psi0 = net.voltage(w["bus"]) * 0.0
            if on:
                rot = np.exp(-2j * math.pi / 3 * np.arange(3))
                psi0 = (bus_v / 1j * rot).real
            else:
                psi0 = net.flux(nm["tr"]).copy()
            ctrl = NfscmController(cp, theta0, psi_nom, v_t_ref, psi0,
                                   net.voltage(w["bus"]).copy(), v_nom, base.omega, dt,
                                   filt.l_f, filt.c_f)
        elif kind == "avscm":
            ctrl = AvscmController(cp, theta0, psi_nom, v_t_ref, v_nom, base.omega,
                                   filt.l_f, filt.c_f)
        else:
            raise NetworkConfigError(f"{g}: unknown controller {kind!r}")
        wpgs.append(Wpg(
            name=g, bus=str(w["bus"]), hv_bus=str(w["hv_bus"]), filt=filt, dc=dc,
            machine=machine, storage=storage, governor=gov, ctrl=ctrl,
            transformer=nm["tr"], source=nm["src"], cap=nm["cap"], breaker=nm["breaker"],
            p_e=p_e,
        ))
    return System(base, dt, net, wpgs, names["faults"], names["load_steps"],
                  {"power_flow": {g: pf["P"][g] * base.s_base / 1e6 for g in energised},
                   "load_scale": scale})
