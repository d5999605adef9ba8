from pathlib import Path

import pytest

from feedersim import netmodel as nm

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "feedersim" / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def synth_r1() -> nm.FeederModel:
    return nm.load_feeder(FIXTURES / "synth-r1.json")


@pytest.fixture(scope="session")
def synth_mini() -> nm.FeederModel:
    return nm.load_feeder(FIXTURES / "synth-mini.json")


def two_bus_feeder(r_pu: float, x_pu: float, nominal_voltage: float = 7200.0,
                   power_base_kva: float = 100.0,
                   slack_voltage_pu: float = 1.0) -> nm.FeederModel:
    """Single-phase two-bus feeder whose line has the given p.u. impedance."""
    z_base = nominal_voltage ** 2 / (power_base_kva * 1000.0)
    feeder = nm.FeederModel(
        name="two-bus", nominal_voltage=nominal_voltage, slack_bus_id="src",
        buses=(nm.Bus("src", ("A",)),
               nm.Bus("load", ("A",), is_service_node=True)),
        lines=(nm.LineSegment("L1", "src", "load", 100.0, 400.0,
                              {"A": complex(r_pu * z_base, x_pu * z_base)}),),
        slack_voltage_pu=slack_voltage_pu,
        power_base_kva=power_base_kva)
    feeder.validate()
    return feeder
