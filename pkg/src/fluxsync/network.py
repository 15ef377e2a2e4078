"""Three-phase nodal EMT model of the test grid.

Every element is reduced to a branch between two nodes (or a node and
ground) obeying ``i = G * (v_from - v_to) + h`` over one step, where ``G`` is
the trapezoidal companion conductance and ``h`` a history current computed
from the end-of-previous-step state.  Stepping therefore means one dense
linear solve per step; the factorised nodal matrix is cached per topology
key (switch positions and magnetizing-curve segments).

Units are per-unit on the AC bases of :class:`~fluxsync.emcore.PerUnitBase`;
inductances and capacitances are given as reactance / susceptance at the
nominal frequency, so the time derivative carries a factor ``1/omega``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .emcore import TWO_PI_3, NumericalFault, ThreePhase

PHASES = ("a", "b", "c")

# element kinds, stored per branch
RL, RC, RES, MAG, SRC = 0, 1, 2, 3, 4


class NetworkConfigError(ValueError):
    """The network description is inconsistent or electrically singular."""


def magnetizing_current(psi, l_m0: float = 500.0, psi_knee: float = 1.2,
                        l_ms: float = 0.3):
    """Odd, continuous piecewise-linear magnetizing characteristic.

    Works on scalars and arrays alike.
    """
    psi = np.asarray(psi, dtype=float)
    mag = np.abs(psi)
    out = np.where(
        mag <= psi_knee,
        mag / l_m0,
        psi_knee / l_m0 + (mag - psi_knee) / l_ms,
    )
    out = np.sign(psi) * out
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Branch:
    """Balanced three-phase series RL element."""

    name: str
    from_bus: str
    to_bus: str | None
    r: float
    l: float

    def __post_init__(self) -> None:
        if self.r < 0 or not self.l > 0:
            raise NetworkConfigError(f"branch {self.name}: need r >= 0 and l > 0")


@dataclass(frozen=True)
class SaturableTransformer:
    """Two-winding unit with the magnetizing branch on the generator side.

    The generator-side winding is an ungrounded star: each phase's
    magnetizing branch joins a private floating neutral node.

    Parameters
    ----------
    r, l : float
        Series leakage resistance and reactance (p.u.).
    l_m0, psi_knee, l_ms : float
        Magnetizing curve: unsaturated inductance, knee flux, saturated
        inductance.
    residual_flux : tuple of float
        Core flux left from the last de-energisation (p.u.).
    """

    name: str
    lv_bus: str
    hv_bus: str
    r: float = 0.003
    l: float = 0.15
    l_m0: float = 500.0
    psi_knee: float = 1.2
    l_ms: float = 0.3
    residual_flux: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if not (self.l_m0 > self.l_ms > 0):
            raise NetworkConfigError(f"{self.name}: need l_m0 > l_ms > 0")
        if not self.psi_knee > 0:
            raise NetworkConfigError(f"{self.name}: knee flux must be positive")
        if self.r < 0 or not self.l > 0:
            raise NetworkConfigError(f"{self.name}: bad leakage impedance")

    def current(self, psi):
        return magnetizing_current(psi, self.l_m0, self.psi_knee, self.l_ms)

    def consistent_flux(self, psi) -> np.ndarray:
        """Shift ``psi`` by a common offset so magnetizing currents sum to zero.

        A floating neutral cannot carry zero-sequence current, so only flux
        patterns with ``sum(f(psi_j)) = 0`` are physically reachable.
        """
        psi = np.asarray(psi, dtype=float)
        lo, hi = psi.min() - 1.0 - self.psi_knee, psi.max() + 1.0 + self.psi_knee

        def total(delta):
            return float(np.sum(self.current(psi - delta)))

        # total() is strictly decreasing in delta
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if total(mid) > 0:
                lo = mid
            else:
                hi = mid
        return psi - 0.5 * (lo + hi)


@dataclass
class FaultElement:
    """Three-phase-to-ground shunt fault, active on ``[t_on, t_off)``."""

    bus: str
    t_on: float
    t_off: float
    r_on: float = 1e-4
    active: bool = False

    def __post_init__(self) -> None:
        if not self.t_off > self.t_on:
            raise NetworkConfigError("fault needs t_off > t_on")
        if not self.r_on > 0:
            raise NetworkConfigError("fault on-resistance must be positive")

    @property
    def name(self) -> str:
        return f"fault_{self.bus}"

    def should_be_active(self, t: float) -> bool:
        return self.t_on <= t < self.t_off


@dataclass
class _Element:
    name: str
    kind: int
    from_bus: str | None
    to_bus: str | None
    r: float = 0.0
    x: float = 0.0  # l for RL/SRC, c for RC, l_m0 for MAG
    extra: dict = field(default_factory=dict)


class Network:
    """Nodal three-phase network with trapezoidal companion models.

    Build with the ``add_*`` methods, call :meth:`finalize`, then
    :meth:`step` once per engine step.
    """

    def __init__(self, dt: float, omega: float = 2 * math.pi * 60.0):
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.dt = float(dt)
        self.omega = float(omega)
        self.buses: list[str] = []
        self._elements: list[_Element] = []
        self._names: set[str] = set()
        self.transformers: dict[str, SaturableTransformer] = {}
        self.sources: dict[str, slice] = {}
        self._neutrals: set[str] = set()
        self._finalized = False

    # ------------------------------------------------------------------ build
    def add_bus(self, name: str) -> None:
        name = str(name)
        if name in self.buses:
            raise NetworkConfigError(f"duplicate bus {name}")
        self.buses.append(name)

    def _check_bus(self, bus, owner):
        if bus is not None and str(bus) not in self.buses:
            raise NetworkConfigError(f"{owner} references unknown bus {bus}")

    def _add(self, el: _Element) -> None:
        if self._finalized:
            raise NetworkConfigError("network already finalized")
        if el.name in self._names:
            raise NetworkConfigError(f"duplicate element name {el.name}")
        self._check_bus(el.from_bus, el.name)
        self._check_bus(el.to_bus, el.name)
        self._names.add(el.name)
        self._elements.append(el)

    def add_branch(self, branch: Branch) -> None:
        self._add(_Element(branch.name, RL, branch.from_bus, branch.to_bus,
                           branch.r, branch.l))

    def add_rl(self, name, from_bus, to_bus, r, l) -> None:
        self.add_branch(Branch(name, from_bus, to_bus, r, l))

    def add_rc(self, name, from_bus, to_bus, r, c) -> None:
        """Series R + C branch; ``c`` is the susceptance at nominal frequency."""
        if r < 0 or not c > 0:
            raise NetworkConfigError(f"{name}: need r >= 0 and c > 0")
        self._add(_Element(name, RC, from_bus, to_bus, r, c))

    def add_resistor(self, name, from_bus, to_bus, r, closed: bool = True) -> None:
        """Resistor behind an ideal switch (open means zero conductance)."""
        if not r > 0:
            raise NetworkConfigError(f"{name}: resistance must be positive")
        self._add(_Element(name, RES, from_bus, to_bus, r, 0.0,
                           {"closed": bool(closed)}))

    def _add_neutral(self, name: str) -> str:
        self.add_bus(name)
        self._neutrals.add(name)
        return name

    def add_source(self, name, to_bus, r, l, floating_neutral: bool = False) -> None:
        """Ideal controlled voltage source behind a series RL filter.

        With ``floating_neutral`` the three phases share an ungrounded star
        point, so the source carries no zero-sequence current (three-wire
        converter); otherwise the star point is ground.
        """
        if r < 0 or not l > 0:
            raise NetworkConfigError(f"{name}: need r >= 0 and l > 0")
        if floating_neutral:
            self._check_bus(to_bus, name)
            start = self._add_neutral(f"{name}.n")
        else:
            start = None
        self._add(_Element(name, SRC, start, to_bus, r, l))

    def add_transformer(self, tr: SaturableTransformer) -> None:
        neutral = self._add_neutral(f"{tr.name}.n")
        self.transformers[tr.name] = tr
        self._add(_Element(f"{tr.name}.m", MAG, tr.lv_bus, neutral, 0.0,
                           tr.l_m0, {"tr": tr}))
        self.add_rl(f"{tr.name}.leak", tr.lv_bus, tr.hv_bus, tr.r, tr.l)

    def add_fault(self, fault: FaultElement) -> None:
        self.add_resistor(fault.name, fault.bus, None, fault.r_on, closed=False)

    # --------------------------------------------------------------- finalize
    def finalize(self) -> None:
        if self._finalized:
            return
        nb = len(self.buses)
        self.n = 3 * nb
        bus_idx = {b: k for k, b in enumerate(self.buses)}
        f_idx, t_idx, kind, r, x = [], [], [], [], []
        self.index: dict[str, slice] = {}
        for el in self._elements:
            start = len(kind)
            for p in range(3):
                f_idx.append(self._node(bus_idx, el.from_bus, p))
                t_idx.append(self._node(bus_idx, el.to_bus, p))
                kind.append(el.kind)
                r.append(el.r)
                x.append(el.x)
            self.index[el.name] = slice(start, start + 3)
            if el.kind == SRC:
                self.sources[el.name] = self.index[el.name]
        self.f = np.array(f_idx, dtype=np.intp)
        self.t = np.array(t_idx, dtype=np.intp)
        self.kind = np.array(kind, dtype=np.int8)
        self.r = np.array(r, dtype=float)
        self.x = np.array(x, dtype=float)
        m = len(kind)
        self.m = m

        # the neutral buses use only their "a" node; pin the unused b/c
        # nodes with a unit conductance to ground so the matrix stays regular
        self._pinned = []
        for name in sorted(self._neutrals):
            k = 3 * bus_idx[name]
            self._pinned += [k + 1, k + 2]

        self.is_l = (self.kind == RL) | (self.kind == SRC)
        self.is_c = self.kind == RC
        self.is_res = self.kind == RES
        self.is_mag = self.kind == MAG
        h = self.dt * self.omega
        self.k_l = np.where(self.is_l, 2.0 * np.where(self.is_l, self.x, 1.0) / h, 0.0)
        self.m_c = np.where(self.is_c, h / (2.0 * np.where(self.is_c, self.x, 1.0)), 0.0)
        self.m_mag = 0.5 * h

        # magnetizing parameters per branch
        self.mag_l0 = np.ones(m)
        self.mag_ls = np.ones(m)
        self.mag_knee = np.ones(m)
        for el in self._elements:
            if el.kind == MAG:
                tr = el.extra["tr"]
                sl = self.index[el.name]
                self.mag_l0[sl] = tr.l_m0
                self.mag_ls[sl] = tr.l_ms
                self.mag_knee[sl] = tr.psi_knee

        self.closed = np.zeros(m, dtype=bool)
        for el in self._elements:
            if el.kind == RES:
                self.closed[self.index[el.name]] = el.extra["closed"]
        # per-phase pending interruption: sign of the current when opening was
        # requested; the phase opens once its current reaches zero
        self.opening = np.zeros(m, dtype=np.int8)

        # incidence with a trailing ground row, sliced off for the solve
        inc = np.zeros((self.n + 1, m))
        inc[self.f, np.arange(m)] += 1.0
        inc[self.t, np.arange(m)] -= 1.0
        self._inc = inc[: self.n]

        self.v = np.zeros(self.n + 1)  # last entry is ground, always 0
        self.i = np.zeros(m)
        self.vc = np.zeros(m)
        self.psi = np.zeros(m)
        self.e = np.zeros(m)
        self._cache: dict[bytes, np.ndarray] = {}
        self._finalized = True
        self._refresh()

    # ------------------------------------------------------------ internals
    def _node(self, bus_idx, bus, phase) -> int:
        """Node of ``bus`` for ``phase``; star points share their "a" node."""
        if bus is None:
            return self.n
        k = 3 * bus_idx[str(bus)]
        return k if str(bus) in self._neutrals else k + phase

    def _segments(self) -> np.ndarray:
        seg = np.zeros(self.m, dtype=np.int8)
        over = self.is_mag & (np.abs(self.psi) > self.mag_knee)
        seg[over] = np.sign(self.psi[over]).astype(np.int8)
        return seg

    def _refresh(self) -> None:
        """Companion conductances and history currents from the present state."""
        G = np.zeros(self.m)
        hist = np.zeros(self.m)
        vb = self.v[self.f] - self.v[self.t]
        l = self.is_l
        G[l] = 1.0 / (self.r[l] + self.k_l[l])
        hist[l] = G[l] * (vb[l] + (self.k_l[l] - self.r[l]) * self.i[l])
        c = self.is_c
        G[c] = 1.0 / (self.r[c] + self.m_c[c])
        hist[c] = -G[c] * (self.vc[c] + self.m_c[c] * self.i[c])
        res = self.is_res
        G[res] = np.where(self.closed[res], 1.0 / self.r[res], 0.0)
        seg = self._segments()
        mg = self.is_mag
        l_seg = np.where(seg[mg] == 0, self.mag_l0[mg], self.mag_ls[mg])
        off = seg[mg] * self.mag_knee[mg] * (1.0 / self.mag_l0[mg] - 1.0 / self.mag_ls[mg])
        G[mg] = self.m_mag / l_seg
        hist[mg] = (self.psi[mg] + self.m_mag * vb[mg]) / l_seg + off
        self.G = G
        self.hist = hist
        self.seg = seg
        self._key = self.closed.tobytes() + seg.tobytes()

    def matrix(self) -> np.ndarray:
        """Inverse nodal matrix for the present switch and segment pattern."""
        return self._matrix()

    def refresh(self) -> None:
        """Recompute companion terms after the state was changed in place."""
        self._refresh()

    def _matrix(self) -> np.ndarray:
        mat = self._cache.get(self._key)
        if mat is None:
            Y = (self._inc * self.G) @ self._inc.T
            for k in self._pinned:
                Y[k, k] += 1.0
            self._check_islands()
            mat = np.linalg.inv(Y)
            self._cache[self._key] = mat
            self._Y = Y
        return mat

    def _check_islands(self) -> None:
        live = self.G > 0
        nodes = self.n + 1
        adj = csr_matrix(
            (np.ones(int(live.sum())), (self.f[live], self.t[live])),
            shape=(nodes, nodes),
        )
        _, labels = connected_components(adj, directed=False)
        floating = [k for k in range(self.n)
                    if labels[k] != labels[self.n] and k not in self._pinned]
        if floating:
            names = sorted({self.buses[k // 3] for k in floating})
            raise NetworkConfigError(
                "singular nodal matrix: island without ground path at buses "
                + ", ".join(names)
            )

    # ----------------------------------------------------------------- step
    def set_source(self, name: str, e) -> None:
        """Set the source voltage held constant over the next step."""
        self.e[self.sources[name]] = e

    def set_switch(self, name: str, closed: bool) -> None:
        sl = self.index[name]
        if not np.all(self.is_res[sl]):
            raise NetworkConfigError(f"{name} is not switchable")
        self.opening[sl] = 0
        if bool(self.closed[sl.start]) != bool(closed):
            self.closed[sl] = closed
            self._refresh()

    def open_at_current_zero(self, name: str) -> None:
        """Open switch ``name`` phase by phase at the next zero of its current.

        Interrupting an inductive current mid-wave chops it and drives the
        surrounding capacitances to unrealistic overvoltages, so a breaker
        holds each phase until its current changes sign.
        """
        sl = self.index[name]
        if not np.all(self.is_res[sl]):
            raise NetworkConfigError(f"{name} is not switchable")
        s = np.sign(self.i[sl]).astype(np.int8)
        s[~self.closed[sl]] = 0
        self.opening[sl] = s
        idle = self.closed[sl] & (s == 0)
        if np.any(idle):
            self.closed[sl] = self.closed[sl] & ~idle
            self._refresh()

    def _interrupt(self) -> None:
        due = (self.opening != 0) & self.closed & (self.i * self.opening <= 0.0)
        if np.any(due):
            self.closed[due] = False
            self.opening[due] = 0

    def step(self) -> None:
        """Advance all branch currents, capacitor voltages and fluxes one step."""
        hist = self.hist + 2.0 * self.G * self.e  # source branches only: e=0 elsewhere
        rhs = -(self._inc @ hist)
        v_new = self._matrix() @ rhs
        if not np.all(np.isfinite(v_new)):
            raise NumericalFault("non-finite node voltage", {"rhs": rhs})
        vb_old = self.v[self.f] - self.v[self.t]
        self.v[: self.n] = v_new
        vb = self.v[self.f] - self.v[self.t]
        i_new = self.G * vb + hist
        c = self.is_c
        self.vc[c] += self.m_c[c] * (i_new[c] + self.i[c])
        mg = self.is_mag
        self.psi[mg] += self.m_mag * (vb[mg] + vb_old[mg])
        self.i = i_new
        self._interrupt()
        self._refresh()

    def kcl_residual(self) -> float:
        """Largest nodal current imbalance of the latest solution (p.u.)."""
        inj = self._inc @ self.i
        inj[self._pinned] = 0.0
        return float(np.max(np.abs(inj))) if self.n else 0.0

    # ------------------------------------------------------------ accessors
    def bus_slice(self, bus) -> slice:
        k = self.buses.index(str(bus))
        return slice(3 * k, 3 * k + 3)

    def voltage(self, bus) -> np.ndarray:
        return self.v[self.bus_slice(bus)]

    def current(self, name: str) -> np.ndarray:
        return self.i[self.index[name]]

    def cap_voltage(self, name: str) -> np.ndarray:
        return self.vc[self.index[name]]

    def flux(self, transformer: str) -> np.ndarray:
        return self.psi[self.index[f"{transformer}.m"]]

    def magnetizing(self, transformer: str) -> np.ndarray:
        tr = self.transformers[transformer]
        return tr.current(self.flux(transformer))

    def set_flux(self, transformer: str, psi) -> None:
        self.psi[self.index[f"{transformer}.m"]] = psi
        self._refresh()

    # ----------------------------------------------------------- phasor init
    def phasor_admittance(self) -> tuple[np.ndarray, list[str]]:
        """Positive-sequence bus admittance at nominal frequency.

        Source branches are excluded (their injections are unknowns of the
        power flow).  Floating neutrals are at zero potential in positive
        sequence, so magnetizing branches appear as shunts.
        """
        grid = [b for b in self.buses if b not in self._neutrals]
        idx = {b: k for k, b in enumerate(grid)}
        Y = np.zeros((len(grid), len(grid)), dtype=complex)
        for el in self._elements:
            y = self._element_admittance(el)
            if y is None:
                continue
            fb = idx.get(str(el.from_bus)) if el.from_bus is not None else None
            tb = idx.get(str(el.to_bus)) if el.to_bus is not None else None
            for a, b in ((fb, tb), (tb, fb)):
                if a is not None:
                    Y[a, a] += y
                    if b is not None:
                        Y[a, b] -= y
        return Y, grid

    def _element_admittance(self, el: _Element):
        if el.kind == RL:
            return 1.0 / complex(el.r, el.x)
        if el.kind == RC:
            return 1.0 / complex(el.r, -1.0 / el.x)
        if el.kind == RES:
            sl = self.index[el.name]
            return 1.0 / el.r if self.closed[sl.start] else None
        if el.kind == MAG:
            return 1.0 / complex(0.0, el.x)
        return None

    def set_phasor_state(self, bus_v: dict, source_i: dict) -> None:
        """Initialise every state from a balanced positive-sequence phasor solution.

        Parameters
        ----------
        bus_v : dict
            Complex phase-a voltage per bus (missing buses are taken as 0).
        source_i : dict
            Complex phase-a current injected by each source branch.
        """
        rot = np.exp(-1j * TWO_PI_3 * np.arange(3))
        vph = np.zeros(self.n + 1, dtype=complex)
        for b, val in bus_v.items():
            vph[self.bus_slice(b)] = val * rot
        iph = np.zeros(self.m, dtype=complex)
        vcph = np.zeros(self.m, dtype=complex)
        psiph = np.zeros(self.m, dtype=complex)
        vb = vph[self.f] - vph[self.t]
        for el in self._elements:
            sl = self.index[el.name]
            y = self._element_admittance(el)
            if el.kind == SRC:
                iph[sl] = source_i.get(el.name, 0.0) * rot
            elif y is not None:
                iph[sl] = y * vb[sl]
            if el.kind == RC:
                vcph[sl] = vb[sl] - el.r * iph[sl]
            if el.kind == MAG:
                psiph[sl] = vb[sl] / 1j
        self.v = vph.real.copy()
        self.v[self.n] = 0.0
        self.i = iph.real.copy()
        self.vc = vcph.real.copy()
        self.psi = psiph.real.copy()
        self._refresh()

    # --------------------------------------------------------- serialisation
    def get_state(self) -> dict:
        return {
            "v": self.v.copy(), "i": self.i.copy(), "vc": self.vc.copy(),
            "psi": self.psi.copy(), "e": self.e.copy(), "closed": self.closed.copy(),
            "opening": self.opening.copy(),
        }

    def set_state(self, state: dict) -> None:
        for key in ("v", "i", "vc", "psi", "e", "closed"):
            setattr(self, key, np.array(state[key], copy=True))
        self.opening = np.array(state.get("opening", np.zeros(self.m, dtype=np.int8)),
                                dtype=np.int8, copy=True)
        self._refresh()


def apply_fault(net: Network, fault: FaultElement, t: float) -> bool:
    """Connect or remove the fault shunt according to ``t``; returns its state."""
    want = fault.should_be_active(t)
    if want != fault.active:
        fault.active = want
        net.set_switch(fault.name, want)
    return fault.active


def phase_values(values) -> ThreePhase:
    return ThreePhase(float(values[0]), float(values[1]), float(values[2]))
