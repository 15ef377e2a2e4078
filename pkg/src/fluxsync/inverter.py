"""Two-level three-phase bridge with RL + RC output filter, and hysteresis modulators."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .emcore import NumericalFault, ThreePhase


class SwitchState(NamedTuple):
    """Upper-arm switch states; each lower arm is the complement."""

    s_a: int = 0
    s_b: int = 0
    s_c: int = 0


def bridge_voltages(s, v_dc: float) -> ThreePhase:
    """Phase voltages of the bridge with the common-mode term ``u_ON`` removed."""
    if v_dc < 0:
        raise ValueError("v_dc must be non-negative")
    u_on = -(v_dc / 3.0) * (s[0] + s[1] + s[2])
    return ThreePhase(v_dc * s[0] + u_on, v_dc * s[1] + u_on, v_dc * s[2] + u_on)


def hysteresis_modulate(err, band: float, previous) -> SwitchState:
    """Per-phase two-level hysteresis: above ``+band`` on, below ``-band`` off."""
    if not band > 0:
        raise ValueError("band must be positive")
    out = []
    for e, p in zip(err, previous):
        if e > band:
            out.append(1)
        elif e < -band:
            out.append(0)
        else:
            out.append(int(p))
    return SwitchState(*out)


def flux_hysteresis_modulate(psi_err, band: float = 0.02,
                             previous=SwitchState()) -> SwitchState:
    """Switch commands that steer a flux tracking error back into ``[-band, band]``.

    A positive error means the measured flux is below its reference, so the
    upper switch is closed to raise the phase voltage.
    """
    return hysteresis_modulate(psi_err, band, previous)


@dataclass(frozen=True)
class FilterParams:
    """Output filter in p.u. reactance / susceptance at nominal frequency."""

    l_f: float = 0.15
    r_f: float = 0.003
    r_f2: float = 1.2
    c_f: float = 0.05

    def __post_init__(self) -> None:
        if not (self.l_f > 0 and self.c_f > 0):
            raise ValueError("filter L and C must be positive")
        if self.r_f < 0 or self.r_f2 < 0:
            raise ValueError("filter resistances must be non-negative")


@dataclass(frozen=True)
class InverterState:
    i_l: ThreePhase = ThreePhase(0.0, 0.0, 0.0)
    u_c: ThreePhase = ThreePhase(0.0, 0.0, 0.0)
    switch: SwitchState = SwitchState()


def inverter_step(inv: InverterState, v_pcc, v_dc: float, dt: float,
                  params: FilterParams = FilterParams(),
                  omega: float = 2 * math.pi * 60.0) -> tuple[InverterState, float]:
    """Advance the filter states against an imposed PCC voltage.

    ``v_dc`` is the DC-link voltage in AC p.u.; ``v_pcc`` is held constant
    over the step, as is the bridge output.  Both the inductor and the
    damped capacitor branch use the trapezoidal rule.

    Returns
    -------
    state : InverterState
    p_e : float
        Three-phase power drawn from the DC link over the step, p.u.,
        evaluated with the step-average inductor current.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    p = params
    h = omega * dt
    e = np.asarray(bridge_voltages(inv.switch, v_dc))
    vp = np.asarray(v_pcc, dtype=float)
    i0 = np.asarray(inv.i_l, dtype=float)
    k = 2.0 * p.l_f / h
    i1 = (2.0 * (e - vp) + (k - p.r_f) * i0) / (k + p.r_f)
    # capacitor branch: u' = (omega/c) * (v_pcc - u) / r_f2
    u0 = np.asarray(inv.u_c, dtype=float)
    if p.r_f2 > 0:
        a = h / (2.0 * p.c_f * p.r_f2)
        u1 = ((1.0 - a) * u0 + 2.0 * a * vp) / (1.0 + a)
    else:
        u1 = vp.copy()
    if not (np.all(np.isfinite(i1)) and np.all(np.isfinite(u1))):
        raise NumericalFault("non-finite inverter state", {"i_l": i1, "u_c": u1})
    p_e = (2.0 / 3.0) * float(np.dot(e, 0.5 * (i0 + i1)))
    state = InverterState(ThreePhase(*map(float, i1)), ThreePhase(*map(float, u1)), inv.switch)
    return state, p_e
