from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fluxsync.inverter import (
    FilterParams,
    InverterState,
    SwitchState,
    bridge_voltages,
    flux_hysteresis_modulate,
    hysteresis_modulate,
    inverter_step,
)

OMEGA = 2 * math.pi * 60.0


class TestBridge:
    def test_single_leg_on(self):
        assert bridge_voltages((1, 0, 0), 3.0) == pytest.approx((2.0, -1.0, -1.0))

    @pytest.mark.parametrize("s", list(itertools.product((0, 1), repeat=3)))
    def test_all_states_are_zero_sum_and_on_the_hexagon(self, s):
        v = bridge_voltages(s, 1.5)
        assert sum(v) == pytest.approx(0.0, abs=1e-15)
        assert all(min(abs(x - k * 0.5) for k in (-2, -1, 0, 1, 2)) < 1e-15 for x in v)

    def test_zero_vectors(self):
        assert bridge_voltages((0, 0, 0), 2.0) == (0.0, 0.0, 0.0)
        assert bridge_voltages((1, 1, 1), 2.0) == pytest.approx((0.0, 0.0, 0.0))

    def test_negative_dc_rejected(self):
        with pytest.raises(ValueError):
            bridge_voltages((1, 0, 0), -1.0)


class TestHysteresis:
    @given(st.floats(-1, 1), st.sampled_from([0, 1]))
    def test_single_phase_rule(self, e, prev):
        band = 0.1
        out = hysteresis_modulate((e, 0.0, 0.0), band, (prev, 0, 1))
        expected = 1 if e > band else 0 if e < -band else prev
        assert out.s_a == expected
        assert out.s_b == 0 and out.s_c == 1

    def test_flux_modulator_direction(self):
        assert flux_hysteresis_modulate((0.5, -0.5, 0.0), 0.02, SwitchState(0, 1, 1)) == (1, 0, 1)

    def test_band_positive(self):
        with pytest.raises(ValueError):
            hysteresis_modulate((0, 0, 0), 0.0, (0, 0, 0))


class TestInverterStep:
    def test_constant_drive_matches_rl_exponential(self):
        p = FilterParams(l_f=0.15, r_f=0.003, r_f2=1.2, c_f=0.05)
        inv = InverterState(switch=SwitchState(1, 0, 0))
        dt = 1e-5
        v_dc = 1.5
        e = bridge_voltages((1, 0, 0), v_dc)[0]
        for _ in range(1000):
            inv, _ = inverter_step(inv, (0.0, 0.0, 0.0), v_dc, dt, p, OMEGA)
        t = 1000 * dt
        exact = e / p.r_f * (1 - math.exp(-OMEGA * p.r_f * t / p.l_f))
        assert inv.i_l.a == pytest.approx(exact, rel=1e-6)

    def test_power_uses_step_average_current(self):
        inv = InverterState(i_l=(0.5, -0.25, -0.25), switch=SwitchState(1, 0, 0))
        new, p_e = inverter_step(inv, (0.2, -0.1, -0.1), 1.2, 1e-5)
        e = np.asarray(bridge_voltages((1, 0, 0), 1.2))
        avg = 0.5 * (np.asarray(inv.i_l) + np.asarray(new.i_l))
        assert p_e == pytest.approx((2 / 3) * float(e @ avg), rel=1e-14)

    def test_capacitor_relaxes_to_pcc_voltage(self):
        inv = InverterState()
        for _ in range(20000):
            inv, _ = inverter_step(inv, (0.3, -0.1, -0.2), 0.0, 1e-5)
        assert np.allclose(inv.u_c, (0.3, -0.1, -0.2), atol=1e-9)

    def test_invalid(self):
        with pytest.raises(ValueError):
            FilterParams(l_f=0.0)
        with pytest.raises(ValueError):
            FilterParams(r_f=-1.0)
        with pytest.raises(ValueError):
            inverter_step(InverterState(), (0, 0, 0), 1.0, 0.0)
