import dataclasses
import math

import numpy as np
import pytest

from feedersim import netmodel as nm
from feedersim import powerflow as pf

from conftest import two_bus_feeder
from oracles import dense_powerflow


class TestDistFlowVoltage:
    def test_lossless_identity(self):
        line = pf.DistFlowLine(v_sending=1.0, r_pu=0.0, x_pu=0.0,
                               p_pu=0.7, q_pu=0.2)
        assert pf.distflow_voltage(line) == pytest.approx(1.0, abs=0)

    def test_no_flow_identity(self):
        line = pf.DistFlowLine(v_sending=1.02, r_pu=0.03, x_pu=0.05,
                               p_pu=0.0, q_pu=0.0)
        assert pf.distflow_voltage(line) == pytest.approx(1.02, abs=1e-15)

    def test_reference_operating_point(self):
        # quadratic root evaluated at high precision
        line = pf.DistFlowLine(1.0, 0.01, 0.01, 0.5, 0.1)
        assert pf.distflow_voltage(line) == pytest.approx(0.9939554143003730,
                                                          abs=1e-12)

    def test_infeasible_point_raises(self):
        line = pf.DistFlowLine(0.3, 0.5, 0.5, 2.0, 2.0)
        assert line.discriminant < 0
        with pytest.raises(pf.OperatingPointError):
            pf.distflow_voltage(line)

    def test_strictly_decreasing_in_real_flow(self):
        prev = math.inf
        for p in np.linspace(0.0, 1.2, 25):
            v = pf.distflow_voltage(pf.DistFlowLine(1.0, 0.02, 0.04, p, 0.1))
            assert v < prev
            prev = v


class TestVoltageSensitivity:
    def test_unity_power_factor_kills_reactive_term(self):
        line = pf.DistFlowLine(1.0, 0.01, 0.02, 0.4, 0.1)
        terms = pf.voltage_sensitivity(line, power_factor=1.0)
        assert terms.via_reactive == 0.0
        assert terms.via_source == 0.0

    def test_power_factor_domain(self):
        line = pf.DistFlowLine(1.0, 0.01, 0.02, 0.4, 0.1)
        for bad in (0.0, -0.5, 1.5):
            with pytest.raises(ValueError):
                pf.voltage_sensitivity(line, power_factor=bad)

    def test_matches_finite_differences(self):
        line = pf.DistFlowLine(1.0, 0.01, 0.01, 0.5, 0.1)
        terms = pf.voltage_sensitivity(line, power_factor=0.97)
        h = 1e-6

        def v(p, q):
            return pf.distflow_voltage(dataclasses.replace(line, p_pu=p, q_pu=q))

        fd_p = (v(0.5 + h, 0.1) - v(0.5 - h, 0.1)) / (2 * h)
        fd_q = (v(0.5, 0.1 + h) - v(0.5, 0.1 - h)) / (2 * h)
        tan_phi = math.tan(math.acos(0.97))
        assert terms.via_real == pytest.approx(fd_p, rel=1e-4)
        assert terms.via_reactive == pytest.approx(fd_q * tan_phi, rel=1e-4)
        assert terms.total == pytest.approx(fd_p + fd_q * tan_phi, rel=1e-4)

    def test_finite_difference_grid(self):
        # analytic derivatives vs central differences over an operating grid
        rng = np.random.default_rng(7)
        h = 1e-6
        worst = 0.0
        for _ in range(100):
            r, x = rng.uniform(0.005, 0.04, 2)
            p, q = rng.uniform(0.05, 0.8), rng.uniform(0.0, 0.4)
            line = pf.DistFlowLine(1.0, r, x, p, q)
            terms = pf.voltage_sensitivity(line, 0.97)

            def v(pp, qq):
                return pf.distflow_voltage(
                    dataclasses.replace(line, p_pu=pp, q_pu=qq))

            fd_p = (v(p + h, q) - v(p - h, q)) / (2 * h)
            fd_q = (v(p, q + h) - v(p, q - h)) / (2 * h)
            worst = max(worst, abs(terms.via_real - fd_p) / abs(fd_p),
                        abs(terms.via_reactive / math.tan(math.acos(0.97)) - fd_q)
                        / abs(fd_q))
        assert worst < 1e-4

    def test_sensitivity_grows_with_loading(self):
        tan_phi = math.tan(math.acos(0.97))
        lo = pf.voltage_sensitivity(
            pf.DistFlowLine(1.0, 0.01, 0.01, 0.2, 0.2 * tan_phi), 0.97)
        hi = pf.voltage_sensitivity(
            pf.DistFlowLine(1.0, 0.01, 0.01, 0.8, 0.8 * tan_phi), 0.97)
        assert abs(hi.total) > abs(lo.total)


class TestSweepSolver:
    def test_zero_load_flat_profile(self, synth_mini):
        sol = pf.solve(synth_mini, {})
        # mini fixture carries zip loads; strip them for the flat check
        bare = nm.FeederModel(
            name="bare", nominal_voltage=synth_mini.nominal_voltage,
            slack_bus_id=synth_mini.slack_bus_id, buses=synth_mini.buses,
            lines=synth_mini.lines, transformers=synth_mini.transformers,
            slack_voltage_pu=1.0)
        sol = pf.solve(bare, {})
        assert sol.converged
        for bus in bare.buses:
            for phase in bus.phases:
                assert abs(sol.voltage_pu(bus.id, phase)) == pytest.approx(1.0, abs=1e-12)
        for line in bare.lines:
            for phase in line.impedance_ohm:
                assert abs(sol.line_current_a(line.id, phase)) < 1e-9

    def test_two_bus_matches_closed_form(self):
        feeder = two_bus_feeder(0.01, 0.01)
        sol = pf.solve(feeder, {("load", "A"): complex(50.0, 10.0)})
        assert sol.converged
        expected = pf.distflow_voltage(pf.DistFlowLine(1.0, 0.01, 0.01, 0.5, 0.1))
        assert abs(sol.voltage_pu("load", "A")) == pytest.approx(expected, abs=1e-9)

    def test_mismatch_invariant(self, synth_mini):
        sol = pf.solve(synth_mini, {("t01s", "A"): complex(10.0, 2.0)},
                       tolerance=1e-8)
        assert sol.converged
        assert sol.max_mismatch_pu < 1e-8

    def test_power_balance_residual_independent(self):
        # reconstruct nodal balance from voltages and admittances only
        feeder = two_bus_feeder(0.02, 0.03)
        s_kw = complex(40.0, 12.0)
        sol = pf.solve(feeder, {("load", "A"): s_kw}, tolerance=1e-10)
        z = feeder.lines[0].impedance_ohm["A"]
        v_src = sol.v["A"][0]
        v_load = sol.v["A"][1]
        current = (v_src - v_load) / z
        s_delivered = v_load * np.conj(current)
        residual = abs(s_delivered - complex(s_kw) * 1000.0)
        assert residual / (feeder.power_base_kva * 1000.0) < 10 * 1e-10

    def test_matches_dense_oracle_on_mini(self, synth_mini):
        loads = {("t01s", "A"): complex(8.0, 2.0),
                 ("t02s", "B"): complex(12.0, 3.0),
                 ("t03s", "C"): complex(5.0, 1.0)}
        sol = pf.solve(synth_mini, loads, tolerance=1e-12)
        oracle = dense_powerflow(synth_mini, loads)
        for key, v_expected in oracle.items():
            assert abs(sol.voltage_pu(*key)) == pytest.approx(
                abs(v_expected), abs=1e-8), key

    def test_matches_dense_oracle_with_caps_and_zip(self):
        feeder = nm.FeederModel(
            name="caps", nominal_voltage=7200.0, slack_bus_id="sub",
            buses=(nm.Bus("sub", ("A", "B", "C")), nm.Bus("m", ("A", "B", "C")),
                   nm.Bus("svc", ("B",), is_service_node=True)),
            lines=(nm.LineSegment("L1", "sub", "m", 500.0, 200.0,
                                  {p: complex(0.4, 0.8) for p in "ABC"}),),
            transformers=(nm.DistributionTransformer(
                "T1", "m", "svc", "B", 50.0, complex(0.01, 0.02), 240.0),),
            capacitors=(nm.CapacitorBank(
                "C1", "m", {"A": 40.0, "B": 40.0, "C": 40.0},
                nm.CapControl("fixed"), True),),
            zip_loads=(nm.ZipLoad("Z1", "m", "A", 60.0, 0.9,
                                  (0.3, 0.3, 0.4), (0.2, 0.2, 0.6)),),
            slack_voltage_pu=1.03)
        feeder.validate()
        loads = {("svc", "B"): complex(30.0, 8.0)}
        sol = pf.solve(feeder, loads, tolerance=1e-12)
        oracle = dense_powerflow(feeder, loads)
        for key, v_expected in oracle.items():
            assert abs(sol.voltage_pu(*key)) == pytest.approx(
                abs(v_expected), abs=1e-8), key

    def test_unknown_load_bus_raises(self, synth_mini):
        with pytest.raises(pf.PowerFlowError):
            pf.solve(synth_mini, {("nope", "A"): 1.0 + 0j})

    def test_nonconvergence_flagged_with_worst_bus(self):
        feeder = two_bus_feeder(0.01, 0.01)
        sol = pf.solve(feeder, {("load", "A"): complex(500.0, 100.0)},
                       max_iter=2)
        assert not sol.converged
        assert sol.worst_bus == "load"

    def test_transformer_loading_reported(self, synth_mini):
        sol = pf.solve(synth_mini, {("t01s", "A"): complex(20.0, 5.0)})
        assert sol.transformer_kva_of("T01") > 19.0
        assert sol.feeder_head_kva > 19.0
