from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluxsync.emcore import (
    CycleWindow,
    MetricNotReady,
    NumericalFault,
    PerUnitBase,
    ThreePhase,
    dc_component,
    fundamental_amplitude,
    integrate_step,
    magnitude_abc,
    polar_to_abc,
    space_vector,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


class TestPerUnitBase:
    def test_peak_phase_voltage(self):
        # 575 V line-to-line RMS -> 575 * sqrt(2/3) V peak phase
        assert PerUnitBase().v_peak == pytest.approx(469.48553403344255, rel=1e-15)

    def test_impedance_base_matches_line_voltage_form(self):
        b = PerUnitBase()
        assert b.z_base == pytest.approx(575.0 ** 2 / 889e6, rel=1e-12)

    def test_peak_current_and_dc_bases(self):
        b = PerUnitBase()
        assert b.i_peak == pytest.approx(1262374.7138169536, rel=1e-12)
        assert b.i_dc_base == pytest.approx(889e6 / 1110.0)
        assert b.flux_base == pytest.approx(b.v_peak / (2 * math.pi * 60))

    def test_balanced_unit_set_carries_unit_power(self):
        v = polar_to_abc(1.0, 0.3)
        i = polar_to_abc(1.0, 0.3)
        assert (2.0 / 3.0) * sum(a * b for a, b in zip(v, i)) == pytest.approx(1.0)

    def test_steps_per_cycle(self):
        assert PerUnitBase().steps_per_cycle(1e-5) == 1667

    @pytest.mark.parametrize("field", ["s_base", "v_base_ac", "v_base_dc", "f_nom"])
    @pytest.mark.parametrize("bad", [0.0, -1.0, float("nan"), float("inf")])
    def test_rejects_non_positive(self, field, bad):
        with pytest.raises(ValueError):
            PerUnitBase(**{field: bad})


class TestThreePhaseAlgebra:
    @given(st.floats(0, 10), st.floats(-10, 10))
    def test_polar_set_is_balanced(self, mag, ang):
        x = polar_to_abc(mag, ang)
        assert abs(x.zero_sequence) <= 1e-12 * max(1.0, mag)
        assert magnitude_abc(x) == pytest.approx(mag, abs=1e-12)

    @given(st.floats(0.01, 10), st.floats(-math.pi + 1e-6, math.pi - 1e-6))
    def test_space_vector_inverts_polar(self, mag, ang):
        z = space_vector(polar_to_abc(mag, ang))
        assert abs(z - mag * complex(math.cos(ang), math.sin(ang))) < 1e-12 * mag + 1e-14

    @given(finite, finite, finite)
    def test_space_vector_ignores_zero_sequence(self, a, b, c):
        x = ThreePhase(a, b, c)
        z0 = space_vector(x)
        z1 = space_vector(x.without_zero_sequence())
        assert abs(z0 - z1) <= 1e-9 * (1 + abs(a) + abs(b) + abs(c))

    def test_arithmetic(self):
        x = ThreePhase(1.0, 2.0, 3.0)
        assert x + (1, 1, 1) == ThreePhase(2.0, 3.0, 4.0)
        assert x - (1, 1, 1) == ThreePhase(0.0, 1.0, 2.0)
        assert x.scaled(2) == ThreePhase(2.0, 4.0, 6.0)
        assert x.zero_sequence == 2.0

    def test_negative_magnitude_rejected(self):
        with pytest.raises(ValueError):
            polar_to_abc(-1.0, 0.0)


class TestIntegrateStep:
    def test_euler_and_trapezoid(self):
        assert integrate_step(1.0, 2.0, 0.5) == 2.0
        assert integrate_step(1.0, 2.0, 0.5, prev_dx_dt=4.0) == 2.5

    def test_trapezoid_is_second_order(self):
        # x' = cos t, x(0)=0 -> x(1) = sin 1
        errs = []
        for n in (100, 200):
            dt, x = 1.0 / n, 0.0
            for k in range(n):
                x = integrate_step(x, math.cos((k + 1) * dt), dt, math.cos(k * dt))
            errs.append(abs(x - math.sin(1.0)))
        assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.01)

    def test_non_finite_raises(self):
        with pytest.raises(NumericalFault):
            integrate_step(1e308, 1e308, 10.0)
        with pytest.raises(ValueError):
            integrate_step(0.0, 1.0, 0.0)


class TestCycleWindow:
    def test_size_and_readiness(self):
        w = CycleWindow(60.0, 1e-5)
        assert w.size == 1667
        with pytest.raises(MetricNotReady):
            dc_component(w)
        for _ in range(w.size):
            w.push(1.0)
        assert w.full and dc_component(w) == 1.0

    def test_constant_window_is_exact(self):
        w = CycleWindow(60.0, 1e-4)
        for _ in range(3 * w.size):
            w.push(0.1)
        assert w.mean() == 0.1

    def test_dc_component_of_offset_sine(self):
        w = CycleWindow(60.0, 1e-5)
        n = w.size
        for k in range(2 * n + 17):
            w.push(0.25 + math.sin(2 * math.pi * k / n))
        assert dc_component(w) == pytest.approx(0.25, abs=1e-12)
        assert fundamental_amplitude(w.samples()) == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=30)
    @given(st.lists(finite, min_size=1, max_size=200))
    def test_running_mean_tracks_exact_mean(self, values):
        w = CycleWindow(60.0, 1.0 / 600.0)  # 10 samples
        for v in values:
            w.push(v)
        assert w.running_mean == pytest.approx(w.mean(), abs=1e-9 * (1 + max(map(abs, values))))
        assert list(w.samples()) == values[-w.size:]

    def test_reset(self):
        w = CycleWindow(60.0, 1.0 / 600.0)
        w.push(3.0)
        w.reset()
        assert w.count == 0
        with pytest.raises(MetricNotReady):
            w.mean()

    def test_too_coarse(self):
        with pytest.raises(ValueError):
            CycleWindow(60.0, 0.02)

    def test_fundamental_amplitude_phase_independent(self):
        k = np.arange(64)
        for ph in (0.0, 0.7, 2.0):
            assert fundamental_amplitude(0.8 * np.cos(2 * np.pi * k / 64 + ph)) == pytest.approx(0.8)
