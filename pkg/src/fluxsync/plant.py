"""Energy side of one wind power generator.

The DC link is a single capacitor fed by the machine-side converter
(modelled as a first-order power lag) and by a storage unit behind a
bidirectional boost stage, and drained by the grid-side inverter.  The
storage current is commanded by a governor acting on the normalised DC-link
voltage error.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .emcore import NumericalFault


@dataclass(frozen=True)
class DcLinkState:
    """DC-link capacitor and the power flows around it (SI units)."""

    v_dc: float = 1110.0
    c: float = 540.0
    p_me: float = 0.0
    p_e: float = 0.0
    i_s: float = 0.0

    def __post_init__(self) -> None:
        if not self.v_dc > 0:
            raise ValueError("v_dc must be positive")
        if not self.c > 0:
            raise ValueError("capacitance must be positive")


def dc_link_step(s: DcLinkState, dt: float) -> DcLinkState:
    """Advance ``C v dv/dt = p_me - p_e`` exactly in the energy variable ``v**2``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    u = s.v_dc * s.v_dc + 2.0 * (s.p_me - s.p_e) * dt / s.c
    if not u > 0 or not math.isfinite(u):
        raise NumericalFault(
            "DC-link collapse",
            {"v_dc": s.v_dc, "p_me": s.p_me, "p_e": s.p_e, "u": u},
        )
    return replace(s, v_dc=math.sqrt(u))


def storage_feed(p_in: float, i_s: float, v_dc: float) -> float:
    """Power delivered into the capacitor by machine side plus storage."""
    return p_in + i_s * v_dc


@dataclass(frozen=True)
class MachineSideSurrogate:
    """First-order lag standing in for turbine, generator and rectifier."""

    p_in: float = 0.0
    p_in_ref: float = 0.0
    time_constant: float = 0.5
    p_max: float = 800e6

    def __post_init__(self) -> None:
        if not self.time_constant > 0:
            raise ValueError("time constant must be positive")


def machine_side_step(m: MachineSideSurrogate, dt: float) -> MachineSideSurrogate:
    """Exact zero-order-hold discretisation of the lag toward the clamped reference."""
    target = min(max(m.p_in_ref, 0.0), m.p_max)
    alpha = 1.0 - math.exp(-dt / m.time_constant)
    p = m.p_in + (target - m.p_in) * alpha
    return replace(m, p_in=min(max(p, 0.0), m.p_max))


@dataclass(frozen=True)
class StorageBoost:
    """Average model of the storage boost stage.

    The duty cycle comes from a proportional current loop
    ``(1 - d) v_dc = v_storage - k_p (i_ref - i_s)``, which gives
    ``L di_s/dt = k_p (i_ref - i_s)`` while the duty stays inside its limits,
    i.e. a first-order response with time constant ``L / k_p``.
    """

    l_boost: float = 0.0012
    i_s: float = 0.0
    duty: float = 0.19
    v_storage: float = 899.1
    p_rating: float = 300e6
    k_p: float = 0.15
    duty_max: float = 0.95

    @property
    def time_constant(self) -> float:
        return self.l_boost / self.k_p


def boost_step(b: StorageBoost, i_s_ref: float, v_dc: float, dt: float) -> StorageBoost:
    if not v_dc > 0:
        raise ValueError("v_dc must be positive")
    i_lim = b.p_rating / v_dc
    i_ref = min(max(i_s_ref, -i_lim), i_lim)
    duty = 1.0 - (b.v_storage - b.k_p * (i_ref - b.i_s)) / v_dc
    duty = min(max(duty, 0.0), b.duty_max)
    di = (b.v_storage - (1.0 - duty) * v_dc) / b.l_boost
    i_s = b.i_s + di * dt
    i_s = min(max(i_s, -i_lim), i_lim)
    return replace(b, i_s=i_s, duty=duty)


@dataclass(frozen=True)
class GovernorState:
    """Droop, filtered-derivative and integral paths on the DC voltage error.

    Parameters
    ----------
    k_pg1, k_pg2, k_pg3 : float
        Droop, derivative and integral gains (p.u. power per p.u. voltage).
    tau_d : float
        Time constant of the derivative low-pass filter (s).
    x_f : float
        Low-pass state tracking the voltage error; the filtered derivative
        is ``(err - x_f) / tau_d``.
    integral : float
        Integral of the voltage error (p.u. s).
    """

    k_pg1: float = 30.0
    k_pg2: float = 15.0
    k_pg3: float = 0.1
    tau_d: float = 0.02
    x_f: float = 0.0
    integral: float = 0.0
    s_base: float = 889e6
    v_dc_nom: float = 1110.0
    p_rating: float = 300e6
    enabled: bool = True

    @property
    def i_limit(self) -> float:
        return self.p_rating / self.v_dc_nom

    def command(self, err: float) -> float:
        """Unsaturated power command in p.u. for the present state."""
        deriv = (err - self.x_f) / self.tau_d
        return self.k_pg1 * err + self.k_pg2 * deriv + self.k_pg3 * self.integral


def governor_step(g: GovernorState, dv: float, dt: float) -> tuple[GovernorState, float]:
    """Return the updated governor and the storage current reference (A)."""
    if not g.enabled:
        return g, 0.0
    i_base = g.s_base / g.v_dc_nom
    i_ref = -g.command(dv) * i_base
    lim = g.i_limit
    saturated = abs(i_ref) >= lim
    i_ref = min(max(i_ref, -lim), lim)
    alpha = dt / g.tau_d
    x_f = g.x_f + (dv - g.x_f) * min(alpha, 1.0)
    integral = g.integral
    # conditional integration: stop winding up while the command is clipped
    if not saturated:
        integral += dv * dt
    if g.k_pg3 > 0:
        cap = g.p_rating / g.s_base / g.k_pg3
        integral = min(max(integral, -cap), cap)
    return replace(g, x_f=x_f, integral=integral), i_ref
