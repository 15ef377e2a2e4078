"""Per-unit bases, three-phase algebra, discrete integration and cycle statistics.

Instantaneous AC quantities are expressed on peak-phase bases, so a balanced
set of 1 p.u. voltages and currents carries exactly 1 p.u. of power and the
instantaneous three-phase power is ``(2/3) * sum(v_j * i_j)`` in p.u.
Flux linkage uses ``v_base / omega_nom`` as its base: integrating a 1 p.u.
sinusoidal voltage yields a 1 p.u. flux amplitude.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

TWO_PI_3 = 2.0 * math.pi / 3.0
SQRT_2_3 = math.sqrt(2.0 / 3.0)


class NumericalFault(RuntimeError):
    """A state became non-finite or left its physical domain mid-simulation."""

    def __init__(self, message: str, state: dict | None = None):
        super().__init__(message)
        self.state = state or {}


class MetricNotReady(RuntimeError):
    """A windowed metric was requested before one full cycle was collected."""


@dataclass(frozen=True)
class PerUnitBase:
    """System bases.

    Parameters
    ----------
    s_base : float
        Three-phase power base in VA.
    v_base_ac : float
        Line-to-line RMS voltage base in V.
    v_base_dc : float
        DC-link voltage base in V.
    f_nom : float
        Nominal frequency in Hz.
    """

    s_base: float = 889e6
    v_base_ac: float = 575.0
    v_base_dc: float = 1110.0
    f_nom: float = 60.0

    def __post_init__(self) -> None:
        for name in ("s_base", "v_base_ac", "v_base_dc", "f_nom"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be strictly positive, got {value!r}")

    @property
    def omega(self) -> float:
        return 2.0 * math.pi * self.f_nom

    @property
    def v_peak(self) -> float:
        """Peak phase-to-neutral voltage base (V)."""
        return self.v_base_ac * math.sqrt(2.0) / math.sqrt(3.0)

    @property
    def i_peak(self) -> float:
        """Peak phase current base (A)."""
        return 2.0 * self.s_base / (3.0 * self.v_peak)

    @property
    def z_base(self) -> float:
        return self.v_peak / self.i_peak

    @property
    def flux_base(self) -> float:
        """Flux-linkage base (Wb), ``v_peak / omega``."""
        return self.v_peak / self.omega

    @property
    def i_dc_base(self) -> float:
        return self.s_base / self.v_base_dc

    @property
    def dc_to_ac(self) -> float:
        """Factor converting a DC-side voltage in volts to AC p.u."""
        return 1.0 / self.v_peak

    def steps_per_cycle(self, dt: float) -> int:
        return int(round(1.0 / (self.f_nom * dt)))


class ThreePhase(NamedTuple):
    a: float
    b: float
    c: float

    @property
    def zero_sequence(self) -> float:
        return (self.a + self.b + self.c) / 3.0

    def without_zero_sequence(self) -> "ThreePhase":
        z = self.zero_sequence
        return ThreePhase(self.a - z, self.b - z, self.c - z)

    def scaled(self, k: float) -> "ThreePhase":
        return ThreePhase(k * self.a, k * self.b, k * self.c)

    def __sub__(self, other):  # type: ignore[override]
        return ThreePhase(self.a - other[0], self.b - other[1], self.c - other[2])

    def __add__(self, other):  # type: ignore[override]
        return ThreePhase(self.a + other[0], self.b + other[1], self.c + other[2])


ZERO3 = ThreePhase(0.0, 0.0, 0.0)


def polar_to_abc(magnitude: float, angle: float) -> ThreePhase:
    """Project a rotating vector onto the three phase axes."""
    if magnitude < 0:
        raise ValueError("magnitude must be non-negative")
    return ThreePhase(
        magnitude * math.cos(angle),
        magnitude * math.cos(angle - TWO_PI_3),
        magnitude * math.cos(angle + TWO_PI_3),
    )


def space_vector(x: Sequence[float]) -> complex:
    """Amplitude-invariant Clarke transform ``(2/3)(a + b e^{j2pi/3} + c e^{-j2pi/3})``."""
    a, b, c = x
    alpha = (2.0 * a - b - c) / 3.0
    beta = (b - c) / math.sqrt(3.0)
    return complex(alpha, beta)


def magnitude_abc(x: Sequence[float]) -> float:
    """Space-vector magnitude; equals the amplitude of a balanced set."""
    return abs(space_vector(x))


def integrate_step(
    x: float, dx_dt: float, dt: float, prev_dx_dt: float | None = None
) -> float:
    """Advance ``x`` by one step.

    Trapezoidal (second order) when the previous derivative is supplied,
    explicit Euler (first order) otherwise.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if prev_dx_dt is None:
        out = x + dt * dx_dt
    else:
        out = x + 0.5 * dt * (dx_dt + prev_dx_dt)
    if not math.isfinite(out):
        raise NumericalFault(
            "non-finite integrator state",
            {"x": x, "dx_dt": dx_dt, "prev_dx_dt": prev_dx_dt, "dt": dt},
        )
    return out


class CycleWindow:
    """Ring buffer holding exactly one fundamental period of samples."""

    def __init__(self, f_nom: float, dt: float):
        self.size = int(round(1.0 / (f_nom * dt)))
        if self.size < 2:
            raise ValueError("dt too coarse for a cycle window")
        self._buf = np.zeros(self.size)
        self._pos = 0
        self.count = 0
        self._sum = 0.0

    @property
    def full(self) -> bool:
        return self.count >= self.size

    def push(self, value: float) -> None:
        old = self._buf[self._pos]
        self._buf[self._pos] = value
        self._pos = (self._pos + 1) % self.size
        self.count += 1
        self._sum += value - old
        if self._pos == 0:
            # resynchronise once per cycle so the running sum cannot drift
            self._sum = math.fsum(self._buf)

    def samples(self) -> np.ndarray:
        """Stored samples, oldest first."""
        n = min(self.count, self.size)
        if n < self.size:
            return self._buf[:n].copy()
        return np.concatenate((self._buf[self._pos:], self._buf[: self._pos]))

    @property
    def running_mean(self) -> float:
        """O(1) mean of the stored samples (round-off level accuracy)."""
        n = min(self.count, self.size)
        return self._sum / n if n else 0.0

    def mean(self) -> float:
        """Correctly rounded mean of the stored samples."""
        n = min(self.count, self.size)
        if n == 0:
            raise MetricNotReady("empty window")
        vals = self._buf if n == self.size else self._buf[:n]
        first = vals[0]
        # fsum(n * [c]) / n is not always c; constant windows return c itself
        if np.all(vals == first):
            return float(first)
        return math.fsum(vals) / n

    def reset(self) -> None:
        self._buf[:] = 0.0
        self._pos = 0
        self.count = 0
        self._sum = 0.0


def dc_component(window: CycleWindow) -> float:
    """Mean over the most recent full fundamental cycle."""
    if not window.full:
        raise MetricNotReady(
            f"window holds {window.count} of {window.size} samples"
        )
    return window.mean()


def fundamental_amplitude(samples: np.ndarray) -> float:
    """Amplitude of the first DFT bin of exactly one cycle of samples."""
    n = len(samples)
    k = np.arange(n)
    return float(2.0 / n * abs(np.dot(samples, np.exp(-2j * np.pi * k / n))))
