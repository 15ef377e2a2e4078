"""Grid-forming controllers for the inverter of one generator.

* NFSCM rotates a flux-linkage reference at a speed set by the DC-link
  voltage error and makes the measured PCC flux (the time integral of the PCC
  voltage) track it.
* LBFC is a per-phase bang-bang funnel law that holds the inductor current
  inside ``[phi_minus, phi_plus]`` during faults.
* A mode switch hands control from NFSCM to LBFC when any phase current
  reaches ``gamma`` and back when the PCC voltage has recovered.
* AVSCM is the voltage-source baseline sharing the NFSCM angle and magnitude
  loops but tracking a capacitor-voltage reference instead of a flux.

The pure ``*_step`` functions operate on frozen state records.  The
``*Controller`` classes wrap the same arithmetic with mutable scalar state
for the inner simulation loop.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .emcore import TWO_PI_3, CycleWindow, ThreePhase, polar_to_abc, space_vector
from .inverter import SwitchState, hysteresis_modulate

NFSCM, LBFC = "NFSCM", "LBFC"
_PHASE_SHIFT = np.array([0.0, -TWO_PI_3, TWO_PI_3])


# --------------------------------------------------------------------- NFSCM
@dataclass(frozen=True)
class NfscmState:
    """Phase loop, magnitude loop and flux measurement of one NFSCM instance.

    Parameters
    ----------
    dtheta : float
        Phase-loop state (rad), the deviation of the reference angle from
        the nominal rotation.
    psi_nom : float
        Flux magnitude reference with zero magnitude-loop integral (p.u.).
    integral : float
        Integral of the terminal voltage error (p.u. s).
    psi_meas : ThreePhase
        Measured PCC flux, the integral of the PCC voltage (p.u.).
    v_prev : ThreePhase
        PCC voltage of the previous sample, for trapezoidal integration.
    """

    dtheta: float = 0.0
    psi_nom: float = 1.0
    integral: float = 0.0
    psi_meas: ThreePhase = ThreePhase(0.0, 0.0, 0.0)
    v_prev: ThreePhase = ThreePhase(0.0, 0.0, 0.0)
    k_i: float = 10.0
    k_e: float = 0.2
    v_t_ref: float = 1.0
    v_dc_nom: float = 1110.0
    f_nom: float = 60.0
    psi_min: float = 0.2
    psi_max: float = 1.5

    @property
    def omega_n(self) -> float:
        return 2.0 * math.pi * self.f_nom

    @property
    def psi_mag_ref(self) -> float:
        return _clamp(self.psi_nom + self.k_e * self.integral, self.psi_min, self.psi_max)


def _clamp(x, lo, hi):
    return lo if x < lo else hi if x > hi else x


def squared_voltage_error(v_dc: float, v_dc_nom: float) -> float:
    return (v_dc * v_dc - v_dc_nom * v_dc_nom) / (v_dc_nom * v_dc_nom)


def nfscm_phase_step(n: NfscmState, v_dc: float, dt: float, t: float = 0.0):
    """Integrate the squared DC-voltage error into the phase-loop state.

    Returns the new state and the reference angle ``dtheta + omega_n * t``.
    """
    if not v_dc > 0:
        raise ValueError("v_dc must be positive")
    dtheta = n.dtheta + n.k_i * squared_voltage_error(v_dc, n.v_dc_nom) * dt
    return replace(n, dtheta=dtheta), dtheta + n.omega_n * t


def nfscm_magnitude_step(n: NfscmState, v_t_meas: float, dt: float):
    """Clamped integral loop on the terminal voltage magnitude.

    The integral stops at the value that puts the reference on a clamp,
    so leaving saturation needs no unwinding.
    """
    if v_t_meas < 0:
        raise ValueError("terminal voltage magnitude must be non-negative")
    integral = n.integral + (n.v_t_ref - v_t_meas) * dt
    if n.k_e > 0:
        lo = (n.psi_min - n.psi_nom) / n.k_e
        hi = (n.psi_max - n.psi_nom) / n.k_e
        integral = _clamp(integral, lo, hi)
    n = replace(n, integral=integral)
    return n, n.psi_mag_ref


def nfscm_output(n: NfscmState, theta: float, psi_mag_ref: float, v_pcc, dt: float):
    """Advance the measured flux and return the flux tracking error.

    The PCC voltage is integrated with the trapezoidal rule; in per-unit the
    integral carries the nominal angular frequency.
    """
    w = n.omega_n * dt * 0.5
    psi = ThreePhase(*(p + w * (v + vp) for p, v, vp in zip(n.psi_meas, v_pcc, n.v_prev)))
    ref = polar_to_abc(psi_mag_ref, theta)
    err = ref - psi
    return replace(n, psi_meas=psi, v_prev=ThreePhase(*map(float, v_pcc))), err


# ---------------------------------------------------------------------- LBFC
@dataclass(frozen=True)
class FunnelState:
    """Per-phase funnel bookkeeping."""

    e: ThreePhase = ThreePhase(0.0, 0.0, 0.0)
    phi_plus: float = 0.3
    phi_minus: float = -0.3
    q: tuple = (False, False, False)

    def __post_init__(self) -> None:
        if not self.phi_minus < 0 < self.phi_plus:
            raise ValueError("funnel needs phi_minus < 0 < phi_plus")


def lbfc_logic(e: float, phi_plus: float, phi_minus: float, q_prev: bool) -> bool:
    """Latched funnel logic ``q = (e >= phi+) or (e > phi- and q_prev)``."""
    if not phi_minus < phi_plus:
        raise ValueError("need phi_minus < phi_plus")
    return (e >= phi_plus) or (e > phi_minus and bool(q_prev))


def lbfc_control(q: bool) -> int:
    """Upper-arm command: open when the current must fall, closed otherwise."""
    return 0 if q else 1


def lbfc_coordinate(e, q, phi_plus: float, phi_minus: float) -> tuple:
    """Keep the bridge off the zero vector while a phase is outside the funnel.

    In a three-wire bridge each phase sees its own command minus the mean of
    all three.  If the phases inside the funnel hold the same latched state
    as a phase outside it, the bridge applies a zero vector and the outside
    phase drifts with the grid voltage.  When every outside phase asks for
    the same state, the inside phases take the opposite one.
    """
    out = [qj for ej, qj in zip(e, q) if not phi_minus < ej < phi_plus]
    if not out or any(qj != out[0] for qj in out):
        return tuple(bool(qj) for qj in q)
    return tuple(bool(qj) if not phi_minus < ej < phi_plus else not out[0]
                 for ej, qj in zip(e, q))


def lbfc_step(f: FunnelState, i_l, i_ref=(0.0, 0.0, 0.0)):
    """Apply the funnel logic to all three phases; returns state and switches."""
    e = ThreePhase(*(i - r for i, r in zip(i_l, i_ref)))
    q = tuple(lbfc_logic(ej, f.phi_plus, f.phi_minus, qj) for ej, qj in zip(e, f.q))
    q = lbfc_coordinate(e, q, f.phi_plus, f.phi_minus)
    return replace(f, e=e, q=q), SwitchState(*(lbfc_control(qj) for qj in q))


# ---------------------------------------------------------------- mode switch
@dataclass
class ModeState:
    """Disturbance and recovery indicators of one generator.

    ``flux`` accumulates ``omega * integral(v_pcc)`` per phase while LBFC is
    active; ``windows`` hold its most recent fundamental cycle.
    """

    gamma: float = 1.75
    tau: float = 0.5
    t_flag: int = 0
    flux: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    windows: list | None = None
    engaged_at: float | None = None
    released_at: float | None = None

    def __post_init__(self) -> None:
        if not (self.gamma > 0 and self.tau > 0):
            raise ValueError("gamma and tau must be positive")

    @property
    def mode(self) -> str:
        return LBFC if self.t_flag else NFSCM


def recovery_deviation(windows) -> float:
    """Largest ``|x - mean(x)|`` over the latest sample of each window."""
    dev = 0.0
    for w in windows:
        if not w.full:
            return 0.0
        s = w.samples()
        dev = max(dev, abs(s[-1] - w.running_mean))
    return dev


def mode_switch_step(m: ModeState, i_l, v_pcc, dt: float, t: float = 0.0,
                     f_nom: float = 60.0) -> ModeState:
    """Update the NFSCM/LBFC flag from the inductor currents and PCC voltage.

    The flag is set when any phase current magnitude reaches ``gamma``.
    While set, the PCC voltage is integrated per phase; once a full cycle
    has been collected, a deviation of the integral from its cycle mean of
    at least ``tau`` means a sinusoidal voltage of useful amplitude is back
    and the flag is cleared.
    """
    if m.windows is None:
        m.windows = [CycleWindow(f_nom, dt) for _ in range(3)]
    if not m.t_flag:
        if max(abs(i_l[0]), abs(i_l[1]), abs(i_l[2])) >= m.gamma:
            m.t_flag = 1
            m.engaged_at = t
            m.flux = [0.0, 0.0, 0.0]
            for w in m.windows:
                w.reset()
        return m
    w_dt = 2.0 * math.pi * f_nom * dt
    for j in range(3):
        m.flux[j] += w_dt * v_pcc[j]
        m.windows[j].push(m.flux[j])
    if recovery_deviation(m.windows) >= m.tau:
        m.t_flag = 0
        m.released_at = t
    return m


# ------------------------------------------------------------ engine classes
@dataclass(frozen=True)
class ControllerParams:
    """Gains and thresholds shared by NFSCM, LBFC and AVSCM.

    The switch decision of NFSCM and AVSCM is a per-phase hysteresis of
    half-width ``band`` on a flux-valued error.  For NFSCM that error is
    built in two stages: the PCC flux error sets a voltage reference that
    removes it with time constant ``t_d``, and the voltage error sets a
    filter-capacitor current demand through the gain ``1 / z_v``.  The
    hysteresis then acts on the filter inductor flux ``l_f * i`` needed to
    meet that demand.  AVSCM feeds its voltage reference straight into the
    second stage.
    """

    k_i: float = 10.0
    k_e: float = 0.2
    band: float = 0.005
    t_d: float = 2e-3
    z_v: float = 1.0
    gamma: float = 1.75
    tau: float = 0.5
    phi: float = 0.3
    psi_min: float = 0.2
    psi_max: float = 1.5
    lbfc: bool = True

    def __post_init__(self) -> None:
        for name in ("band", "t_d", "z_v", "gamma", "tau", "phi"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.psi_min < self.psi_max:
            raise ValueError("need 0 < psi_min < psi_max")


class _AngleMagnitude:
    """Phase and magnitude loops in plain floats."""

    def __init__(self, p: ControllerParams, theta0: float, psi_nom: float,
                 v_t_ref: float, v_dc_nom: float, omega: float):
        self.p = p
        self.omega = omega
        self.dtheta = theta0
        self.psi_nom = psi_nom
        self.integral = 0.0
        self.v_t_ref = v_t_ref
        self.v_dc_nom = v_dc_nom
        self.freeze = False
        self.theta = theta0
        self.speed = omega
        self.mag = psi_nom

    def update(self, t: float, v_dc: float, v_pcc, dt: float) -> None:
        p = self.p
        x = squared_voltage_error(v_dc, self.v_dc_nom)
        self.dtheta += p.k_i * x * dt
        self.speed = self.omega + p.k_i * x
        self.theta = self.dtheta + self.omega * t
        if not self.freeze:
            self.integral += (self.v_t_ref - magnitude_from(v_pcc)) * dt
            if p.k_e > 0:
                lo = (p.psi_min - self.psi_nom) / p.k_e
                hi = (p.psi_max - self.psi_nom) / p.k_e
                self.integral = _clamp(self.integral, lo, hi)
        self.mag = _clamp(self.psi_nom + p.k_e * self.integral, p.psi_min, p.psi_max)


class _Modulated:
    """Shared inner stage: capacitor-current demand to switch commands."""

    def _setup(self, p, omega, l_f, c_f):
        self.p = p
        self.omega = omega
        self.l_f = l_f
        self.c_f = c_f
        self.switch = np.zeros(3, dtype=np.int8)
        self.err = np.zeros(3)

    def _inner(self, v_ref, dv_ref, v, i_c) -> np.ndarray:
        """``v_ref`` and its time derivative ``dv_ref`` (p.u./s) to switches."""
        p = self.p
        i_c_ref = self.c_f * dv_ref / self.omega + (v_ref - v) / p.z_v
        err = self.l_f * (i_c_ref - i_c)
        err -= err.mean()
        self.err = err
        _hysteresis(err, p.band, self.switch)
        return self.switch


class NfscmController(_Modulated):
    """NFSCM with optional LBFC fault-current mode.

    Parameters
    ----------
    theta0 : float
        Initial flux angle (rad).
    psi0 : array_like
        Initial measured PCC flux (p.u.).
    v0 : array_like
        PCC voltage at t = 0 (p.u.), the first trapezoid end point.
    """

    kind = "nfscm"

    def __init__(self, p: ControllerParams, theta0: float, psi_nom: float,
                 v_t_ref: float, psi0, v0, v_dc_nom: float = 1110.0,
                 omega: float = 2 * math.pi * 60.0, dt: float = 1e-5,
                 l_f: float = 0.15, c_f: float = 0.05):
        self._setup(p, omega, l_f, c_f)
        self.loops = _AngleMagnitude(p, theta0, psi_nom, v_t_ref, v_dc_nom, omega)
        self.psi = np.array(psi0, dtype=float)
        self.v_prev = np.array(v0, dtype=float)
        self.mode = ModeState(gamma=p.gamma, tau=p.tau)
        self.mode.windows = [CycleWindow(omega / (2 * math.pi), dt) for _ in range(3)]
        self.q = [False, False, False]

    @property
    def in_lbfc(self) -> bool:
        return bool(self.mode.t_flag)

    def step(self, t: float, dt: float, v_dc: float, v_pcc, i_l, i_c) -> np.ndarray:
        p = self.p
        v = np.asarray(v_pcc, dtype=float)
        self.psi += 0.5 * self.omega * dt * (v + self.v_prev)
        self.v_prev = v.copy()
        was = self.mode.t_flag
        if p.lbfc:
            mode_switch_step(self.mode, i_l, v, dt, t, self.omega / (2 * math.pi))
        lp = self.loops
        if self.mode.t_flag and not was:
            lp.freeze = True
            self.q = [bool(i >= 0.0) for i in i_l]
        elif was and not self.mode.t_flag:
            # hand back: continue from the measured flux angle
            lp.freeze = False
            z = space_vector(self.psi)
            lp.dtheta = math.atan2(z.imag, z.real) - self.omega * t
        lp.update(t, v_dc, v, dt)
        if self.mode.t_flag:
            q = [lbfc_logic(i_l[j], p.phi, -p.phi, self.q[j]) for j in range(3)]
            self.q = list(lbfc_coordinate(i_l, q, p.phi, -p.phi))
            for j in range(3):
                self.switch[j] = lbfc_control(self.q[j])
            return self.switch
        ang = lp.theta + _PHASE_SHIFT
        ref = lp.mag * np.cos(ang)
        dref = -lp.mag * lp.speed * np.sin(ang)
        # voltage that removes the flux error with time constant t_d
        v_ref = (dref + (ref - self.psi) / p.t_d) / self.omega
        dv_ref = -lp.speed * lp.speed / self.omega * ref
        return self._inner(v_ref, dv_ref, v, np.asarray(i_c))


class AvscmController(_Modulated):
    """Voltage-source baseline: the same inner stage driven by a voltage reference."""

    kind = "avscm"
    in_lbfc = False

    def __init__(self, p: ControllerParams, theta0: float, psi_nom: float,
                 v_t_ref: float, v_dc_nom: float = 1110.0,
                 omega: float = 2 * math.pi * 60.0, l_f: float = 0.15,
                 c_f: float = 0.05):
        self._setup(p, omega, l_f, c_f)
        self.loops = _AngleMagnitude(p, theta0, psi_nom, v_t_ref, v_dc_nom, omega)

    def step(self, t: float, dt: float, v_dc: float, v_pcc, i_l, i_c) -> np.ndarray:
        lp = self.loops
        v = np.asarray(v_pcc, dtype=float)
        lp.update(t, v_dc, v, dt)
        ang = lp.theta + math.pi / 2 + _PHASE_SHIFT
        v_ref = lp.mag * (lp.speed / self.omega) * np.cos(ang)
        dv_ref = -lp.speed * np.sin(ang) * lp.mag * (lp.speed / self.omega)
        return self._inner(v_ref, dv_ref, v, np.asarray(i_c))


def _sv(x):
    z = space_vector(x)
    return z.real, z.imag


def _hysteresis(err, band, sw) -> None:
    for j in range(3):
        if err[j] > band:
            sw[j] = 1
        elif err[j] < -band:
            sw[j] = 0


def avscm_step(n: NfscmState, v_dc: float, u_c, dt: float, t: float,
               band: float = 0.02, previous=SwitchState()):
    """Functional form of the baseline: shared loops, voltage hysteresis on ``u_c``."""
    n, theta = nfscm_phase_step(n, v_dc, dt, t)
    n, mag = nfscm_magnitude_step(n, magnitude_from(u_c), dt)
    ref = polar_to_abc(mag, theta + math.pi / 2)
    err = (ref - u_c).without_zero_sequence()
    return n, hysteresis_modulate(err, band, previous)


def magnitude_from(x) -> float:
    return abs(space_vector(x))
