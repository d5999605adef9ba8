"""Regenerates the shipped fixtures under src/feedersim/fixtures/.

Deterministic: rerunning produces byte-identical files.  The feeder is a
synthetic 12.47 kV-class radial network (7.2 kV line-to-neutral): a four-
section trunk, four fused laterals, and 40 single-phase 25 kVA service
transformers balanced 14/13/13 across phases, populated with houses until
the simulated peak lands in the 90-100% band of the target.
"""

import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from feedersim import engine, netmodel as nm

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "feedersim" / "fixtures"

POPULATE_SEED = 11
SCENARIO_SEED = 2024
TARGET_PEAK_KVA = 480.0
SLACK_PU = 1.0530

TRUNK_Z = complex(0.50, 0.90)    # ohms per section, per phase
LATERAL_Z = complex(0.25, 0.40)


def build_skeleton() -> nm.FeederModel:
    buses = [nm.Bus("sub", ("A", "B", "C"))]
    lines = []
    xfmrs = []
    fuses = []
    prev = "sub"
    phase_cycle = ["A", "B", "C"]
    x_count = 0
    for s in range(1, 5):
        trunk = f"p{s}"
        buses.append(nm.Bus(trunk, ("A", "B", "C")))
        lines.append(nm.LineSegment(
            f"LT{s}", prev, trunk, 1200.0, 230.0,
            {p: TRUNK_Z for p in ("A", "B", "C")}))
        lat = f"q{s}"
        buses.append(nm.Bus(lat, ("A", "B", "C")))
        lines.append(nm.LineSegment(
            f"LL{s}", trunk, lat, 500.0, 100.0,
            {p: LATERAL_Z for p in ("A", "B", "C")}))
        fuses.append(nm.Fuse(f"F{s}", f"LL{s}", 80.0))
        for k in range(10):
            phase = phase_cycle[(x_count) % 3]
            x_count += 1
            xid = f"T{x_count:02d}"
            sec = f"{xid.lower()}s"
            buses.append(nm.Bus(sec, (phase,), is_service_node=True))
            xfmrs.append(nm.DistributionTransformer(
                id=xid, bus_primary=lat, bus_secondary=sec, phase=phase,
                rating_kva=25.0, impedance_pu=complex(0.015, 0.02),
                secondary_voltage=120.0, planning_load_kva=15.0))
        prev = trunk

    # v_off sits above the light-load overnight level so the bank stays in
    # service through the warm-up and test hour
    caps = (nm.CapacitorBank(
        "CAP1", "p3", {"A": 60.0, "B": 60.0, "C": 60.0},
        nm.CapControl("voltage", v_on=0.98, v_off=1.060,
                      sense_bus="p3", sense_phase="A"), on=True),)
    feeder = nm.FeederModel(
        name="synth-r1", nominal_voltage=7200.0, slack_bus_id="sub",
        buses=tuple(buses), lines=tuple(lines), transformers=tuple(xfmrs),
        capacitors=caps, fuses=tuple(fuses), slack_voltage_pu=SLACK_PU)
    feeder.validate()
    return feeder


def build_mini_skeleton() -> nm.FeederModel:
    buses = [nm.Bus("sub", ("A", "B", "C")), nm.Bus("p1", ("A", "B", "C"))]
    lines = [nm.LineSegment("LT1", "sub", "p1", 1200.0, 150.0,
                            {p: TRUNK_Z for p in ("A", "B", "C")})]
    xfmrs = []
    for k, phase in enumerate(("A", "B", "C")):
        xid = f"T{k + 1:02d}"
        sec = f"{xid.lower()}s"
        buses.append(nm.Bus(sec, (phase,), is_service_node=True))
        xfmrs.append(nm.DistributionTransformer(
            id=xid, bus_primary="p1", bus_secondary=sec, phase=phase,
            rating_kva=25.0, impedance_pu=complex(0.015, 0.02),
            secondary_voltage=120.0, planning_load_kva=15.0))
    feeder = nm.FeederModel(
        name="synth-mini", nominal_voltage=7200.0, slack_bus_id="sub",
        buses=tuple(buses), lines=tuple(lines), transformers=tuple(xfmrs),
        slack_voltage_pu=SLACK_PU)
    feeder.validate()
    return feeder


def write_weather(path: Path) -> engine.WeatherSeries:
    # two diurnal cycles at 30 min resolution; day 2 is the hotter one
    times = np.arange(0, 48 * 3600 + 1, 1800.0)
    hours = times / 3600.0
    day2 = hours >= 24.0
    mean = np.where(day2, 30.25, 29.0)
    amp = np.where(day2, 5.25, 5.0)
    temps = mean + amp * np.sin((hours % 24.0 - 9.0) / 24.0 * 2.0 * np.pi)
    rows = ["time_s,temp_c"]
    rows += [f"{t:.0f},{c:.4f}" for t, c in zip(times, temps)]
    path.write_text("\n".join(rows) + "\n")
    return engine.WeatherSeries(times_s=times, temps_c=temps)


def write_regulation_signal(path: Path) -> None:
    # fast zero-mean segment: mixed sinusoids plus smoothed seeded noise,
    # normalized to unit peak magnitude
    rng = np.random.default_rng(np.random.SeedSequence((SCENARIO_SEED, 99)))
    t = np.arange(0.0, 3600.0 + 1e-9, 2.0)
    s = (0.55 * np.sin(2 * np.pi * t / 533.0)
         + 0.35 * np.sin(2 * np.pi * t / 211.0 + 1.3)
         + 0.25 * np.sin(2 * np.pi * t / 97.0 + 4.1))
    noise = rng.standard_normal(len(t))
    kernel = np.exp(-0.5 * (np.arange(-30, 31) / 10.0) ** 2)
    kernel /= kernel.sum()
    s += 0.4 * np.convolve(noise, kernel, mode="same")
    s -= s.mean()
    s /= np.max(np.abs(s))
    rows = ["time_s,signal_pu"]
    rows += [f"{x:.0f},{v:.6f}" for x, v in zip(t, s)]
    path.write_text("\n".join(rows) + "\n")


def main() -> None:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    weather = write_weather(FIXTURES / "weather-2day.csv")
    write_regulation_signal(FIXTURES / "regd-1h.csv")

    skeleton = build_skeleton()
    populated = nm.populate_houses(skeleton, TARGET_PEAK_KVA,
                                   seed=POPULATE_SEED, weather=weather)
    nm.save_feeder(populated, FIXTURES / "synth-r1.json")
    print(f"synth-r1: {len(populated.houses)} houses, "
          f"{len(populated.transformers)} transformers")

    peak = engine.find_peak_hour(populated, weather, seed=SCENARIO_SEED)
    print(f"peak hour starts at {peak:.0f} s ({peak / 3600.0:.1f} h)")

    mini = nm.populate_houses(build_mini_skeleton(), 36.0, seed=POPULATE_SEED,
                              weather=weather)
    nm.save_feeder(mini, FIXTURES / "synth-mini.json")
    print(f"synth-mini: {len(mini.houses)} houses")
    mini_peak = engine.find_peak_hour(mini, weather, seed=SCENARIO_SEED)
    print(f"mini peak hour starts at {mini_peak:.0f} s")

    for name, feeder_file, start in (("scenario-r1", "synth-r1.json", peak),
                                     ("scenario-mini", "synth-mini.json",
                                      mini_peak)):
        config = {
            "feeder": feeder_file,
            "weather": "weather-2day.csv",
            "regulation_signal": "regd-1h.csv",
            "case": "regulation",
            "test_hour_start_s": start,
            "seed": SCENARIO_SEED,
        }
        (FIXTURES / f"{name}.json").write_text(
            json.dumps(config, indent=2) + "\n")
    print("scenario configs written")


if __name__ == "__main__":
    main()
