import math

import numpy as np
import pytest

from feedersim import transformer as xf


class TestParams:
    def test_interpolation_endpoints(self):
        lo = xf.params_for_rating(5.0)
        hi = xf.params_for_rating(175.0)
        assert lo.full_load_loss_pu == pytest.approx(0.0232)
        assert hi.full_load_loss_pu == pytest.approx(0.0112)
        assert lo.oil_volume_gal == pytest.approx(5.7)
        assert hi.tank_fittings_weight_lb == pytest.approx(581.9)

    def test_interpolation_within_range(self):
        for rating in (5.0, 37.5, 100.0, 175.0):
            p = xf.params_for_rating(rating)
            assert 0.0112 <= p.full_load_loss_pu <= 0.0232
            assert 0.0042 <= p.no_load_loss_pu <= 0.0065
            assert 5.7 <= p.oil_volume_gal <= 62.7
            assert 56.6 <= p.core_coil_weight_lb <= 484.9
            assert 67.9 <= p.tank_fittings_weight_lb <= 581.9
            assert p.oil_tau_rated_s > 0

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            xf.params_for_rating(200.0)

    def test_oil_tau_from_capacity_and_loss(self):
        p = xf.params_for_rating(25.0)
        cap = (0.06 * p.core_coil_weight_lb + 0.04 * p.tank_fittings_weight_lb
               + 1.33 * p.oil_volume_gal)
        loss_w = (p.full_load_loss_pu + p.no_load_loss_pu) * 25_000.0
        assert p.oil_tau_rated_s == pytest.approx(
            cap * p.rated_oil_rise_c / loss_w * 3600.0)


class TestUltimateRises:
    def test_rated_load_identity(self):
        p = xf.params_for_rating(50.0)
        wind, oil = xf.ultimate_rises(p, 1.0)
        assert wind == pytest.approx(80.0)
        assert oil == pytest.approx(60.0)

    def test_zero_load_limit(self):
        p = xf.params_for_rating(50.0)
        wind, oil = xf.ultimate_rises(p, 0.0)
        assert wind == 0.0
        assert oil == pytest.approx(60.0 * (1.0 / (p.loss_ratio + 1.0)) ** 0.8)

    def test_half_load_with_loss_ratio_three(self):
        p = xf.XfmrThermalParams(full_load_loss_pu=0.021,
                                 no_load_loss_pu=0.007,
                                 oil_tau_rated_s=3600.0)
        assert p.loss_ratio == pytest.approx(3.0)
        _, oil = xf.ultimate_rises(p, 0.5)
        assert oil == pytest.approx(60.0 * ((0.25 * 3 + 1) / 4) ** 0.8, rel=1e-12)


class TestAgingRate:
    def test_unity_at_reference(self):
        assert xf.aging_rate(110.0) == pytest.approx(1.0, abs=1e-15)

    def test_reference_value_at_120(self):
        assert xf.aging_rate(120.0) == pytest.approx(1.1047899131327388, rel=1e-12)

    def test_strictly_increasing(self):
        grid = np.linspace(0.0, 200.0, 400)
        rates = [xf.aging_rate(t) for t in grid]
        assert all(b > a for a, b in zip(rates, rates[1:]))


class TestAccumulateAging:
    def test_unity_rate_accrues_real_time(self):
        state = xf.TransformerThermalState()
        for _ in range(60):
            state = xf.accumulate_aging(state, 1.0, 60.0)
        assert state.minutes_aged == pytest.approx(60.0)

    def test_below_reference_accrues_less(self):
        p = xf.params_for_rating(25.0)
        state = xf.TransformerThermalState()
        minutes = 0.0
        for _ in range(120):
            state = xf.step_thermal(p, state, 0.8, 30.0, 30.0)
            minutes += 0.5
            assert xf.hotspot_c(state, 30.0) < 110.0
        assert state.minutes_aged < minutes

    def test_matches_trapezoid_quadrature(self):
        # smooth hot-spot trace; step accumulation vs trapezoid integration
        dt = 2.0
        t = dt * np.arange(1, 901)
        temps = 85.0 + 20.0 * np.sin(2 * np.pi * t / 1200.0)
        rates = np.array([xf.aging_rate(c) for c in temps])
        state = xf.TransformerThermalState()
        for f in rates:
            state = xf.accumulate_aging(state, f, dt)
        start_rate = xf.aging_rate(85.0 + 20.0 * math.sin(0.0))
        trapezoid = float(np.trapz(np.concatenate([[start_rate], rates]),
                                   dx=dt / 60.0))
        assert state.minutes_aged == pytest.approx(trapezoid, rel=1e-3)


class TestStepThermal:
    def test_fixed_point_at_ultimates(self):
        p = xf.params_for_rating(25.0)
        wind, oil = xf.ultimate_rises(p, 0.9)
        state = xf.TransformerThermalState(oil_rise_c=oil, winding_rise_c=wind)
        out = xf.step_thermal(p, state, 0.9, 35.0, 60.0)
        assert out.oil_rise_c == pytest.approx(oil, abs=1e-12)
        assert out.winding_rise_c == pytest.approx(wind, abs=1e-12)

    def test_winding_step_response_exact(self):
        p = xf.params_for_rating(25.0)
        load = 1.2
        wind_u, _ = xf.ultimate_rises(p, load)
        state = xf.TransformerThermalState()
        dt = 2.0
        for k in range(1, 1801):
            state = xf.step_thermal(p, state, load, 30.0, dt)
            if k % 30 == 0:
                t = k * dt
                expected = wind_u * (1.0 - math.exp(-t / p.winding_tau_s))
                assert state.winding_rise_c == pytest.approx(expected, abs=1e-9)

    def test_square_wave_matches_fine_step(self):
        p = xf.params_for_rating(25.0)

        def run(dt):
            state = xf.TransformerThermalState()
            trace = []
            t = 0.0
            while t < 2 * 3600.0 - 1e-9:
                load = 0.5 if (int(t // 900.0) % 2 == 0) else 1.5
                state = xf.step_thermal(p, state, load, 30.0, dt)
                t += dt
                trace.append((round(t, 6), state.oil_rise_c + state.winding_rise_c))
            return dict(trace)

        coarse = run(30.0)
        fine = run(3.0)
        diffs = [abs(v - fine[t]) for t, v in coarse.items() if t in fine]
        assert len(diffs) > 100
        assert max(diffs) < 0.05

    def test_zero_load_cooldown_monotone(self):
        p = xf.params_for_rating(25.0)
        wind, oil = xf.ultimate_rises(p, 1.0)
        state = xf.TransformerThermalState(oil_rise_c=oil, winding_rise_c=wind)
        _, oil_floor = xf.ultimate_rises(p, 0.0)
        prev = (oil, wind)
        for _ in range(600):
            state = xf.step_thermal(p, state, 0.0, 25.0, 60.0)
            assert state.oil_rise_c <= prev[0] + 1e-12
            assert state.winding_rise_c <= prev[1] + 1e-12
            prev = (state.oil_rise_c, state.winding_rise_c)
        assert state.winding_rise_c == pytest.approx(0.0, abs=1e-6)
        assert state.oil_rise_c >= oil_floor - 1e-9

    def test_hotspot_reconstruction_identity(self):
        p = xf.params_for_rating(37.5)
        state = xf.TransformerThermalState()
        for _ in range(50):
            state = xf.step_thermal(p, state, 1.1, 33.0, 30.0)
            assert xf.hotspot_c(state, 33.0) == pytest.approx(
                33.0 + state.oil_rise_c + state.winding_rise_c, abs=0)

    def test_rejects_bad_inputs(self):
        p = xf.params_for_rating(25.0)
        state = xf.TransformerThermalState()
        with pytest.raises(ValueError):
            xf.step_thermal(p, state, math.inf, 30.0, 2.0)
        with pytest.raises(ValueError):
            xf.step_thermal(p, state, 1.0, 30.0, 0.0)
        bare = xf.XfmrThermalParams()
        with pytest.raises(ValueError):
            xf.step_thermal(bare, state, 1.0, 30.0, 2.0)
        assert xf.resolve_params(bare, 25.0).oil_tau_rated_s > 0
