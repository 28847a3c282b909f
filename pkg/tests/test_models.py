import numpy as np
import pytest
from scipy.optimize import brentq

from platoon_gen.core import ObservationFeatures, VehicleState
from platoon_gen.models import (
    EMERGENCY_DECEL,
    IdmModel,
    IdmParams,
    equilibrium_gap,
    idm_acceleration,
    step_block,
)
from platoon_gen.network import LstmModel, zero_params

P = IdmParams()


def scalar_idm(v, dv, dx, a=1.4, b=2.0, v0=30.0, s0=2.0, T=1.5, delta=4.0):
    """Textbook IDM written out independently of the library."""
    s_star = s0 + v * T + v * (-dv) / (2.0 * (a * b) ** 0.5)
    return a * (1.0 - (v / v0) ** delta - (s_star / dx) ** 2)


class TestIdmAcceleration:
    def test_jam_equilibrium(self):
        assert idm_acceleration(ObservationFeatures(0.0, 0.0, 2.0), P) == 0.0

    def test_free_road_at_desired_speed(self):
        assert abs(idm_acceleration(ObservationFeatures(30.0, 0.0, 1e9), P)) < 1e-6

    def test_hand_value(self):
        # 1.4 * (1 - (1/3)^4 - (17/30)^2)
        acc = idm_acceleration(ObservationFeatures(10.0, 0.0, 30.0), P)
        assert acc == pytest.approx(0.9331604938271605, abs=1e-12)
        assert acc == pytest.approx(scalar_idm(10.0, 0.0, 30.0), abs=1e-12)

    def test_matches_scalar_formula_on_grid(self):
        for v in (0.0, 5.0, 12.0, 25.0):
            for dv in (-5.0, 0.0, 3.0):
                for dx in (5.0, 20.0, 80.0):
                    expected = np.clip(scalar_idm(v, dv, dx), -EMERGENCY_DECEL, 1.4)
                    assert idm_acceleration(ObservationFeatures(v, dv, dx), P) == pytest.approx(expected, abs=1e-12)

    def test_emergency_clamp(self):
        assert idm_acceleration(ObservationFeatures(20.0, -10.0, 0.1), P) == -EMERGENCY_DECEL

    def test_decreasing_in_speed(self):
        v = np.linspace(0.0, 29.0, 200)
        for dx in (10.0, 40.0, 150.0):
            acc = idm_acceleration(ObservationFeatures(v, np.zeros_like(v), np.full_like(v, dx)), P)
            unclamped = acc > -EMERGENCY_DECEL
            assert np.all(np.diff(acc[unclamped]) < 0)

    def test_no_nan_on_grid(self):
        v, dv, dx = np.meshgrid(np.linspace(0, 40, 21), np.linspace(-20, 20, 21), np.geomspace(0.1, 1e4, 21))
        acc = idm_acceleration(ObservationFeatures(v, dv, dx), P)
        assert np.all(np.isfinite(acc))
        assert acc.min() >= -EMERGENCY_DECEL and acc.max() <= P.a_max

    @pytest.mark.parametrize("v_e", [0.5, 5.0, 15.0, 25.0, 29.0])
    def test_equilibrium_fixed_point(self, v_e):
        gap = brentq(lambda g: scalar_idm(v_e, 0.0, g), 0.5, 1e6, xtol=1e-14, rtol=1e-15)
        assert abs(idm_acceleration(ObservationFeatures(v_e, 0.0, gap), P)) < 1e-10
        assert equilibrium_gap(v_e, P) == pytest.approx(gap, rel=1e-10)


class TestIdmParams:
    def test_defaults(self):
        assert (P.a_max, P.b, P.v0, P.g_jam, P.t_headway, P.delta) == (1.4, 2.0, 30.0, 2.0, 1.5, 4.0)

    def test_positive_required(self):
        with pytest.raises(ValueError):
            IdmParams(b=0.0)

    def test_scaled(self):
        assert P.scaled({"v0": 0.5}).v0 == 15.0


class TestStepBlock:
    def test_idm_jam_fixed_point(self):
        s, _ = step_block(IdmModel(), VehicleState(0.0, 0.0, 0.3), VehicleState(2.0, 0.0), None, 0.5)
        assert (s.x, s.v, s.a) == (0.0, 0.0, 0.0)

    def test_idm_one_step(self):
        s, _ = step_block(IdmModel(), VehicleState(0.0, 10.0), VehicleState(30.0, 10.0), None, 0.5)
        assert s.v == pytest.approx(10.46658024691358, abs=1e-12)
        assert s.x == pytest.approx(s.v * 0.5, abs=1e-12)

    def test_zero_lstm_coasts(self):
        model = LstmModel(zero_params())
        mem = model.initial_memory()
        s = VehicleState(0.0, 10.0)
        for _ in range(5):
            s, mem = step_block(model, s, VehicleState(s.x + 25.0, 11.0), mem, 0.5)
            assert s.a == 0.0 and s.v == 10.0
        assert s.x == 25.0
