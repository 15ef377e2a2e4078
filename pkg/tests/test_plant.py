from __future__ import annotations

import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fluxsync.emcore import NumericalFault
from fluxsync.plant import (
    DcLinkState,
    GovernorState,
    MachineSideSurrogate,
    StorageBoost,
    boost_step,
    dc_link_step,
    governor_step,
    machine_side_step,
    storage_feed,
)


class TestDcLink:
    @given(st.floats(-50e6, 50e6), st.floats(1e-6, 1e-2))
    def test_energy_update_is_exact(self, dp, dt):
        s = dc_link_step(DcLinkState(v_dc=1110.0, c=540.0, p_me=dp), dt)
        assert 0.5 * 540.0 * s.v_dc ** 2 == pytest.approx(0.5 * 540.0 * 1110.0 ** 2 + dp * dt,
                                                         rel=1e-12)

    def test_balanced_powers_hold_voltage(self):
        s = DcLinkState(p_me=5e6, p_e=5e6)
        for _ in range(100):
            s = dc_link_step(s, 1e-5)
        assert s.v_dc == 1110.0

    def test_collapse_raises(self):
        with pytest.raises(NumericalFault) as exc:
            dc_link_step(DcLinkState(v_dc=10.0, c=540.0, p_e=1e9), 1e-3)
        assert exc.value.state["v_dc"] == 10.0

    def test_invalid(self):
        with pytest.raises(ValueError):
            DcLinkState(v_dc=0.0)
        with pytest.raises(ValueError):
            DcLinkState(c=-1.0)
        with pytest.raises(ValueError):
            dc_link_step(DcLinkState(), 0.0)

    def test_storage_feed(self):
        assert storage_feed(100e6, 1000.0, 1100.0) == 100e6 + 1.1e6


class TestMachineSide:
    def test_first_order_lag_is_exact(self):
        m = MachineSideSurrogate(p_in=0.0, p_in_ref=400e6, time_constant=0.5)
        dt = 1e-3
        for _ in range(500):
            m = machine_side_step(m, dt)
        assert m.p_in == pytest.approx(400e6 * (1 - math.exp(-1.0)), rel=1e-10)

    def test_reference_clamped(self):
        m = MachineSideSurrogate(p_in=790e6, p_in_ref=2e9, p_max=800e6)
        for _ in range(10000):
            m = machine_side_step(m, 1e-3)
        assert m.p_in <= 800e6
        m = machine_side_step(MachineSideSurrogate(p_in=1e6, p_in_ref=-5e6), 10.0)
        assert m.p_in >= 0.0

    def test_invalid(self):
        with pytest.raises(ValueError):
            MachineSideSurrogate(time_constant=0.0)


class TestStorageBoost:
    def test_time_constant(self):
        assert StorageBoost(l_boost=1.2e-3, k_p=0.15).time_constant == pytest.approx(8e-3)

    def test_tracks_reference_with_first_order_response(self):
        b = StorageBoost(i_s=0.0)
        v_dc, dt, target = 1110.0, 1e-5, 5000.0
        n = int(round(b.time_constant / dt))
        for _ in range(n):
            b = boost_step(b, target, v_dc, dt)
        # one time constant -> 1 - 1/e of the step, up to the explicit update
        assert b.i_s / target == pytest.approx(1 - math.exp(-1.0), abs=2e-3)

    def test_slew_limit_of_the_duty_range(self):
        b = StorageBoost(i_s=0.0)
        b1 = boost_step(b, 1e9, 1110.0, 1e-5)
        # duty saturated at its maximum: the largest rise the stage can make
        assert b1.duty == b.duty_max
        assert b1.i_s == pytest.approx((b.v_storage - (1 - b.duty_max) * 1110.0) / b.l_boost * 1e-5)
        b2 = boost_step(b, -1e9, 1110.0, 1e-5)
        assert b2.duty == 0.0
        assert b2.i_s == pytest.approx((b.v_storage - 1110.0) / b.l_boost * 1e-5)

    def test_current_limited_by_rating(self):
        b = StorageBoost(i_s=0.0)
        for _ in range(200000):
            b = boost_step(b, 1e9, 1110.0, 1e-5)
            if b.duty > 0:
                break
        assert abs(b.i_s) <= b.p_rating / 1110.0 + 1e-9

    def test_invalid_voltage(self):
        with pytest.raises(ValueError):
            boost_step(StorageBoost(), 0.0, 0.0, 1e-5)


class TestGovernor:
    def test_disabled_commands_nothing(self):
        g = GovernorState(enabled=False)
        g2, i_ref = governor_step(g, 0.05, 1e-5)
        assert i_ref == 0.0 and g2 is g

    @given(st.floats(1e-4, 1e-2))
    def test_overvoltage_charges_storage(self, dv):
        _, i_ref = governor_step(GovernorState(), dv, 1e-5)
        assert i_ref < 0.0
        _, i_ref = governor_step(GovernorState(), -dv, 1e-5)
        assert i_ref > 0.0

    def test_droop_value(self):
        g = GovernorState(k_pg2=0.0, k_pg3=0.0)
        _, i_ref = governor_step(g, -0.001, 1e-5)
        assert i_ref == pytest.approx(30.0 * 0.001 * 889e6 / 1110.0)

    def test_saturation_stops_integration(self):
        g = GovernorState()
        g2, i_ref = governor_step(g, -0.5, 1e-5)
        assert i_ref == pytest.approx(g.i_limit)
        assert g2.integral == g.integral

    def test_derivative_filter_tracks_error(self):
        g = GovernorState()
        for _ in range(20000):
            g, _ = governor_step(g, 0.001, 1e-5)
        assert g.x_f == pytest.approx(0.001 * (1 - (1 - 1e-5 / 0.02) ** 20000), rel=1e-9)
