"""Deterministic fixed-step orchestration.

Order of one step ``n`` (time ``t = n * dt``):

0. scheduled events whose time has been reached are applied,
1. measurements are sampled from the network state left by step ``n-1``,
2. mode switches are updated (inside the NFSCM controller),
3. every controller produces switch commands,
4. bridge voltages are written into the network sources and the inverter
   draw ``p_e`` is evaluated with the step-average filter current, the end
   value predicted from the filter equation at the sampled PCC voltage,
5. DC link, governor, storage boost and machine side advance,
6. the network advances to ``t + dt``,
7. the recorder samples the new state.

Controllers thus act on measurements that are exactly one step old.
"""
from __future__ import annotations

import logging
import math
import pickle
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as K
from .inverter import InverterState, SwitchState, bridge_voltages, inverter_step
from .plant import boost_step, dc_link_step, governor_step, machine_side_step

log = logging.getLogger(__name__)

EVENT_KINDS = ("load_step", "fault_on", "fault_off", "breaker_close", "setpoint_change")


def event_step(time: float, dt: float) -> int:
    """Index of the first step with ``n * dt >= time``."""
    return max(0, int(math.ceil(time / dt - 1e-9)))


@dataclass(frozen=True)
class ScenarioEvent:
    time: float
    kind: str
    payload: dict = field(default_factory=dict)
    index: int = 0

    def __post_init__(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if not self.time >= 0:
            raise ValueError("event time must be non-negative")


@dataclass
class RunArtifacts:
    """Everything a run produces.

    ``channels`` maps names to decimated arrays (``time_s`` first);
    ``segments`` holds full-rate peaks between consecutive events;
    ``cycles`` holds per-cycle mean and fundamental amplitude of the
    transformer currents computed from every step.
    """

    channels: dict
    units: dict
    metrics: dict
    cycles: dict
    segments: list
    completed: bool = True
    error: str | None = None
    failed_step: int | None = None
    snapshot: dict | None = None


def _channel_names(wpg_names, buses):
    ch = []
    for n in wpg_names:
        ch += [(f"{n}.{c}", u) for c, u in K.WPG_CHANNELS]
    for b in buses:
        ch += [(f"bus{b}.v_{p}", "pu") for p in "abc"]
    return ch


def pcc_power(v, i) -> tuple[np.ndarray, np.ndarray]:
    """Instantaneous three-phase active and reactive power in p.u.

    ``v`` and ``i`` are phase voltages and currents in peak-phase p.u.; the
    reactive power uses the line-voltage form
    ``q = ((v_b - v_c) i_a + (v_c - v_a) i_b + (v_a - v_b) i_c) / sqrt(3)``,
    so that a current lagging the voltage gives positive ``q``.
    """
    va, vb, vc = (np.asarray(x, dtype=float) for x in v)
    ia, ib, ic = (np.asarray(x, dtype=float) for x in i)
    p = (2.0 / 3.0) * (va * ia + vb * ib + vc * ic)
    q = (2.0 / 3.0) / math.sqrt(3.0) * ((vb - vc) * ia + (vc - va) * ib + (va - vb) * ic)
    return p, q


class Simulation:
    """Fixed-step engine over a :class:`~fluxsync.system.System`.

    The per-step work runs in compiled chunks.  A chunk ends at the next
    scheduled event, when a magnetizing branch changes segment (a new nodal
    matrix is needed) or on a numerical fault; Python then applies the
    event or fetches the matrix and resumes.

    Parameters
    ----------
    system : System
    events : list of ScenarioEvent
    decimation : int
        Keep every ``decimation``-th step in the recorded channels.
    record_buses : sequence of str
        Network buses whose voltages are recorded as well.
    """

    def __init__(self, system, events=(), decimation: int = 20,
                 record_buses=("7", "9")):
        if decimation < 1:
            raise ValueError("decimation must be >= 1")
        self.sys = system
        self.dt = system.dt
        self.omega = system.base.omega
        self.decimation = int(decimation)
        self.step_index = 0
        self.events = sorted(events, key=lambda e: (event_step(e.time, self.dt), e.index))
        self._ev_steps = [event_step(e.time, self.dt) for e in self.events]
        self._next_ev = 0
        self.log: list = []
        net = system.net
        self.record_buses = [b for b in record_buses if b in net.buses]
        self.names = [w.name for w in system.wpgs]
        self._channels = _channel_names(self.names, self.record_buses)
        self._pack(system)
        self.spc = system.base.steps_per_cycle(self.dt)
        nw = len(system.wpgs)
        self.win = np.zeros((nw, 3, self.spc))
        self.flux_acc = np.zeros((nw, 3))
        self.win_sum = np.zeros((nw, 3))
        self.entered = np.zeros((nw, 3))
        self.switch_log = np.zeros((4096, 3), dtype=np.int64)
        # rows written, cycles written, switch-log entries, cycle buffer position
        self.ctr = np.zeros(4, dtype=np.int64)
        self.rec_buses = np.array([[net.bus_slice(b).start + p for p in range(3)]
                                   for b in self.record_buses], dtype=np.intp).reshape(-1, 3)
        nch = len(self._channels)
        self.peaks = np.zeros(nch)
        self.seg_peaks = np.zeros(nch)
        self.segments: list = []
        self._seg_start = 0.0
        self.cyc_buf = np.zeros((3 * nw, self.spc))
        k = np.arange(self.spc)
        self.cyc_cos = np.cos(2 * np.pi * k / self.spc)
        self.cyc_sin = -np.sin(2 * np.pi * k / self.spc)
        self.rec_time = np.zeros(0)
        self.rec_data = np.zeros((0, nch))
        self.cyc_t = np.zeros(0)
        self.cyc_mean = np.zeros((0, 3 * nw))
        self.cyc_fund = np.zeros((0, 3 * nw))
        self.topology_changes = 0

    # ------------------------------------------------------------ packing
    def _pack(self, system) -> None:
        net = system.net
        nw = len(system.wpgs)
        P = np.zeros((nw, K.N_PARAM))
        S = np.zeros((nw, K.N_STATE))
        idx = np.zeros((5, nw, 3), dtype=np.intp)
        self.psi_meas = np.zeros((nw, 3))
        self.v_prev = np.zeros((nw, 3))
        self.sw = np.zeros((nw, 3), dtype=np.int64)
        self.q = np.zeros((nw, 3), dtype=np.int64)
        for k, w in enumerate(system.wpgs):
            c = w.ctrl
            p = c.p
            lp = c.loops
            g = w.governor
            st = w.storage
            P[k, K.P_KIND] = 0.0 if c.kind == "nfscm" else 1.0
            P[k, [K.P_KI, K.P_KE, K.P_BAND, K.P_TD, K.P_ZV, K.P_GAMMA, K.P_TAU, K.P_PHI,
                  K.P_PSIMIN, K.P_PSIMAX]] = [p.k_i, p.k_e, p.band, p.t_d, p.z_v, p.gamma,
                                              p.tau, p.phi, p.psi_min, p.psi_max]
            P[k, K.P_LBFC] = float(p.lbfc and c.kind == "nfscm")
            P[k, K.P_LF] = w.filt.l_f
            P[k, K.P_CF] = w.filt.c_f
            P[k, K.P_RF] = w.filt.r_f
            P[k, K.P_VNOM] = g.v_dc_nom
            P[k, K.P_C] = w.dc.c
            P[k, K.P_TM] = w.machine.time_constant
            P[k, K.P_PMAX] = w.machine.p_max
            P[k, K.P_LB] = st.l_boost
            P[k, K.P_VST] = st.v_storage
            P[k, K.P_PRATE] = st.p_rating
            P[k, K.P_KP] = st.k_p
            P[k, K.P_DMAX] = st.duty_max
            P[k, [K.P_K1, K.P_K2, K.P_K3, K.P_TAUD]] = [g.k_pg1, g.k_pg2, g.k_pg3, g.tau_d]
            P[k, K.P_GOV] = float(g.enabled)
            P[k, K.P_PSINOM] = lp.psi_nom
            P[k, K.P_VTREF] = lp.v_t_ref
            P[k, K.P_SBASE] = g.s_base
            S[k, K.S_VDC] = w.dc.v_dc
            S[k, K.S_PIN] = w.machine.p_in
            S[k, K.S_PINREF] = w.machine.p_in_ref
            S[k, K.S_IS] = st.i_s
            S[k, K.S_DUTY] = st.duty
            S[k, K.S_XF] = g.x_f
            S[k, K.S_GINT] = g.integral
            S[k, K.S_DTH] = lp.dtheta
            S[k, K.S_MINT] = lp.integral
            S[k, K.S_PE] = w.p_e
            S[k, K.S_THETA] = lp.theta
            S[k, K.S_SPEED] = lp.speed
            S[k, K.S_MAG] = lp.mag
            S[k, K.S_CROSS_T] = -1.0
            idx[0, k] = np.arange(3) + net.bus_slice(w.bus).start
            for row, name in ((1, w.source), (2, w.cap), (3, f"{w.transformer}.leak"),
                              (4, f"{w.transformer}.m")):
                sl = net.index[name]
                idx[row, k] = np.arange(sl.start, sl.stop)
            if c.kind == "nfscm":
                self.psi_meas[k] = c.psi
                self.v_prev[k] = c.v_prev
        self.P, self.S = P, S
        self.pcc, self.src, self.cap, self.leak, self.magb = (idx[j].copy() for j in range(5))

    @property
    def t(self) -> float:
        return self.step_index * self.dt

    @property
    def channel_names(self) -> list:
        return [c[0] for c in self._channels]

    # ------------------------------------------------------------ recording
    def _row(self) -> np.ndarray:
        """Recorded channels of the present state (matches the kernel)."""
        net = self.sys.net
        P, S = self.P, self.S
        out = []
        for k in range(len(self.names)):
            m = net.psi[self.magb[k]]
            ma = self.magb[k]
            i_m = [K.magnetizing(m[j], net.mag_l0[ma[j]], net.mag_knee[ma[j]], net.mag_ls[ma[j]])
                   for j in range(3)]
            out += [S[k, K.S_VDC], S[k, K.S_PE] / 1e6, S[k, K.S_PIN] / 1e6,
                    S[k, K.S_IS] * S[k, K.S_VDC] / 1e6, S[k, K.S_TFLAG]]
            out += list(net.i[self.src[k]])
            out += list(net.i[self.leak[k]] + net.i[self.magb[k]])
            out += list(net.v[self.pcc[k]])
            out += list(m)
            out += i_m
            out.append(S[k, K.S_DTH])
        for b in self.rec_buses:
            out += list(net.v[b])
        return np.array(out, dtype=float)

    def _reserve(self, n_end: int) -> None:
        rows = n_end // self.decimation + 2
        if rows > len(self.rec_time):
            extra = rows - len(self.rec_time)
            self.rec_time = np.concatenate((self.rec_time, np.zeros(extra)))
            self.rec_data = np.concatenate(
                (self.rec_data, np.zeros((extra, self.rec_data.shape[1]))))
        cyc = n_end // self.spc + 2
        if cyc > len(self.cyc_t):
            extra = cyc - len(self.cyc_t)
            self.cyc_t = np.concatenate((self.cyc_t, np.zeros(extra)))
            self.cyc_mean = np.concatenate(
                (self.cyc_mean, np.zeros((extra, self.cyc_mean.shape[1]))))
            self.cyc_fund = np.concatenate(
                (self.cyc_fund, np.zeros((extra, self.cyc_fund.shape[1]))))

    def _record_initial(self) -> None:
        row = self._row()
        self.rec_time[0] = 0.0
        self.rec_data[0] = row
        np.maximum(self.peaks, np.abs(row), out=self.peaks)
        np.maximum(self.seg_peaks, np.abs(row), out=self.seg_peaks)
        self.ctr[0] = 1

    def _close_segment(self) -> None:
        names = self.channel_names
        self.segments.append({
            "t_start": self._seg_start, "t_end": self.t,
            "peaks": dict(zip(names, self.seg_peaks.tolist())),
        })
        self._seg_start = self.t
        self.seg_peaks[:] = 0.0

    # --------------------------------------------------------------- events
    def _wpg_index(self, name) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(name) from None

    def _apply(self, ev: ScenarioEvent) -> None:
        net = self.sys.net
        p = ev.payload
        if ev.kind == "load_step":
            net.set_switch(self.sys.load_steps[ev.index], True)
        elif ev.kind in ("fault_on", "fault_off"):
            fe = self.sys.faults[str(p["bus"])]
            fe.active = ev.kind == "fault_on"
            if fe.active:
                net.set_switch(fe.name, True)
            else:
                net.open_at_current_zero(fe.name)
        elif ev.kind == "breaker_close":
            w = self.sys.wpgs[self._wpg_index(p["wpg"])]
            net.set_switch(w.breaker, True)
        elif ev.kind == "setpoint_change":
            self.S[self._wpg_index(p["wpg"]), K.S_PINREF] = float(p["p_mw"]) * 1e6
        self.log.append((self.step_index, self.t, ev.kind, dict(p)))

    # ------------------------------------------------------------------ run
    def advance(self, n_end: int) -> tuple[int, int]:
        """Run up to step ``n_end``; returns the kernel stop code and its detail."""
        net = self.sys.net
        self._reserve(n_end)
        if self.ctr[0] == 0:
            self._record_initial()
        while self.step_index < n_end:
            applied = False
            while (self._next_ev < len(self.events)
                   and self._ev_steps[self._next_ev] <= self.step_index):
                if not applied and self.step_index > 0:
                    self._close_segment()
                applied = True
                self._apply(self.events[self._next_ev])
                self._next_ev += 1
            stop = n_end
            if self._next_ev < len(self.events):
                stop = min(stop, self._ev_steps[self._next_ev])
            yinv = np.ascontiguousarray(net.matrix())
            n, code, info = K.run_chunk(
                self.step_index, stop, self.dt, self.omega, self.sys.base.v_peak,
                self.decimation,
                net.v, net.i, net.vc, net.psi, net.f, net.t, net.kind, net.r, net.k_l,
                net.m_c, net.m_mag, net.closed, net.opening, net.mag_l0, net.mag_ls, net.mag_knee,
                net.G, net.hist, net.seg, net.e, yinv, net.n, np.zeros(net.n),
                np.zeros(net.m),
                self.P, self.S, self.pcc, self.src, self.cap, self.leak, self.magb,
                self.psi_meas, self.v_prev, self.sw, self.q, self.flux_acc, self.win,
                self.win_sum, self.entered, self.switch_log, self.ctr,
                self.rec_buses, self.rec_time, self.rec_data, self.peaks, self.seg_peaks,
                self.cyc_buf, self.cyc_cos, self.cyc_sin, self.cyc_t, self.cyc_mean,
                self.cyc_fund,
            )
            self.step_index = int(n)
            if code == K.TOPOLOGY:
                self.topology_changes += 1
                net.refresh()
            elif code != K.DONE:
                return int(code), int(info)
        return K.DONE, 0

    def run(self, t_end: float) -> RunArtifacts:
        """Run to ``t_end`` (seconds) and collect channels and metrics."""
        if not t_end > 0:
            raise ValueError("t_end must be positive")
        n_end = int(round(t_end / self.dt))
        code, info = self.advance(n_end)
        self._close_segment()
        art = self.artifacts()
        if code != K.DONE:
            what = {K.FAULT_DC: f"DC-link collapse in {self.names[info]}"
                    if 0 <= info < len(self.names) else "DC-link collapse",
                    K.FAULT_NAN: "non-finite node voltage"}[code]
            art.completed = False
            art.failed_step = self.step_index
            art.error = f"{what} at step {self.step_index} (t = {self.t:.6f} s)"
            art.snapshot = {"t": self.t, "state": self.get_state()}
            log.warning("%s", art.error)
        return art

    def artifacts(self) -> RunArtifacts:
        from .metrics import compute_metrics

        rows = int(self.ctr[0])
        channels = {"time_s": self.rec_time[:rows].copy()}
        for k, name in enumerate(self.channel_names):
            channels[name] = self.rec_data[:rows, k].copy()
        units = dict(self._channels)
        s_mva = self.sys.base.s_base / 1e6
        for n in self.names:
            p_out, q_out = pcc_power([channels[f"{n}.v_pcc_{p}"] for p in "abc"],
                                     [channels[f"{n}.i_t_{p}"] for p in "abc"])
            channels[f"{n}.p_out"], units[f"{n}.p_out"] = p_out * s_mva, "MW"
            channels[f"{n}.q_out"], units[f"{n}.q_out"] = q_out * s_mva, "Mvar"
        nc = min(int(self.ctr[1]), len(self.cyc_t))
        names = [f"{n}.i_t_{p}" for n in self.names for p in "abc"]
        cycles = {"t_end": self.cyc_t[:nc].copy(), "names": names,
                  "mean": self.cyc_mean[:nc].copy(), "fund": self.cyc_fund[:nc].copy()}
        art = RunArtifacts(channels, units, {}, cycles, [dict(s) for s in self.segments])
        art.metrics = compute_metrics(self, art)
        return art

    def lbfc_transitions(self) -> dict:
        """Per generator, lists of engagement and release times (s)."""
        out = {n: {"engaged": [], "released": []} for n in self.names}
        count = min(int(self.ctr[2]), len(self.switch_log))
        for w, step, on in self.switch_log[:count]:
            out[self.names[w]]["engaged" if on else "released"].append(float(step) * self.dt)
        return out

    # -------------------------------------------------------- serialisation
    def get_state(self) -> bytes:
        """Opaque snapshot from which :meth:`set_state` resumes bit-exactly."""
        return pickle.dumps(self.__dict__, protocol=pickle.HIGHEST_PROTOCOL)

    def set_state(self, blob: bytes) -> None:
        self.__dict__.update(pickle.loads(blob))

class ReferenceSimulation:
    """Pure-Python engine, one step per call; used to cross-check the kernel.

    Parameters
    ----------
    system : System
    events : list of ScenarioEvent
    """

    def __init__(self, system, events=()):
        self.sys = system
        self.dt = system.dt
        self.step_index = 0
        self.events = sorted(events, key=lambda e: (event_step(e.time, self.dt), e.index))
        self._ev_steps = [event_step(e.time, self.dt) for e in self.events]
        self._next_ev = 0
        self.log: list = []
        self.lbfc_engaged: dict = {w.name: [] for w in system.wpgs}
        self.lbfc_released: dict = {w.name: [] for w in system.wpgs}
        self._channels = self._channel_list()

    @property
    def t(self) -> float:
        return self.step_index * self.dt

    # ------------------------------------------------------------- channels
    def _channel_list(self):
        ch = []
        for w in self.sys.wpgs:
            n = w.name
            ch += [(f"{n}.v_dc", "V"), (f"{n}.p_e", "MW"), (f"{n}.p_in", "MW"),
                   (f"{n}.p_s", "MW"), (f"{n}.mode", "flag")]
            ch += [(f"{n}.i_l_{p}", "pu") for p in "abc"]
            ch += [(f"{n}.i_t_{p}", "pu") for p in "abc"]
            ch += [(f"{n}.v_pcc_{p}", "pu") for p in "abc"]
            ch += [(f"{n}.psi_t_{p}", "pu") for p in "abc"]
            ch += [(f"{n}.i_m_{p}", "pu") for p in "abc"]
            ch += [(f"{n}.theta", "rad")]
        for b in ("7", "9"):
            if b in self.sys.net.buses:
                ch += [(f"bus{b}.v_{p}", "pu") for p in "abc"]
        return ch

    def _row(self) -> np.ndarray:
        net = self.sys.net
        vals = []
        for w in self.sys.wpgs:
            lp = w.ctrl.loops
            vals += [w.dc.v_dc, w.p_e / 1e6, w.machine.p_in / 1e6,
                     w.storage.i_s * w.dc.v_dc / 1e6, float(w.ctrl.in_lbfc)]
            vals += list(net.current(w.source))
            vals += list(net.current(f"{w.transformer}.leak") + net.current(f"{w.transformer}.m"))
            vals += list(net.voltage(w.bus))
            psi = net.flux(w.transformer)
            vals += list(psi)
            vals += list(net.magnetizing(w.transformer))
            vals.append(lp.dtheta)
        for b in ("7", "9"):
            if b in net.buses:
                vals += list(net.voltage(b))
        return np.array(vals)

    # --------------------------------------------------------------- events
    def _apply(self, ev: ScenarioEvent) -> None:
        net = self.sys.net
        p = ev.payload
        if ev.kind == "load_step":
            net.set_switch(self.sys.load_steps[ev.index], True)
        elif ev.kind in ("fault_on", "fault_off"):
            fe = self.sys.faults[str(p["bus"])]
            fe.active = ev.kind == "fault_on"
            if fe.active:
                net.set_switch(fe.name, True)
            else:
                net.open_at_current_zero(fe.name)
        elif ev.kind == "breaker_close":
            w = self._wpg(p["wpg"])
            net.set_switch(w.breaker, True)
        elif ev.kind == "setpoint_change":
            w = self._wpg(p["wpg"])
            w.machine = replace(w.machine, p_in_ref=float(p["p_mw"]) * 1e6)
        self.log.append((self.step_index, self.t, ev.kind, dict(p)))

    def _wpg(self, name):
        for w in self.sys.wpgs:
            if w.name == name:
                return w
        raise KeyError(name)

    # ----------------------------------------------------------------- step
    def step(self) -> None:
        n = self.step_index
        t = n * self.dt
        dt = self.dt
        while self._next_ev < len(self.events) and self._ev_steps[self._next_ev] <= n:
            self._apply(self.events[self._next_ev])
            self._next_ev += 1
        net = self.sys.net
        base = self.sys.base
        v_peak = base.v_peak
        for w in self.sys.wpgs:
            v_pcc = net.voltage(w.bus).copy()
            i_l = net.current(w.source).copy()
            ctrl = w.ctrl
            was = ctrl.in_lbfc
            sw = ctrl.step(t, dt, w.dc.v_dc, v_pcc, i_l, net.current(w.cap).copy())
            if ctrl.in_lbfc != was:
                (self.lbfc_engaged if ctrl.in_lbfc else self.lbfc_released)[w.name].append(t)
            v_dc_pu = w.dc.v_dc / v_peak
            net.set_source(w.source, bridge_voltages(sw, v_dc_pu))
            inv = InverterState(tuple(i_l), tuple(net.cap_voltage(w.cap)), SwitchState(*sw))
            _, p_e = inverter_step(inv, v_pcc, v_dc_pu, dt, w.filt, base.omega)
            p_e *= base.s_base
            w.p_e = p_e
            w.machine = machine_side_step(w.machine, dt)
            dv = w.dc.v_dc / w.governor.v_dc_nom - 1.0
            w.governor, i_ref = governor_step(w.governor, dv, dt)
            w.storage = boost_step(w.storage, i_ref, w.dc.v_dc, dt)
            i_s = w.storage.i_s
            w.dc = dc_link_step(replace(w.dc, p_me=w.machine.p_in + i_s * w.dc.v_dc,
                                        p_e=p_e, i_s=i_s), dt)
        net.step()
        self.step_index = n + 1
