"""Feeder data model, schema (de)serialization, and the synthetic populator.

The native feeder schema is a single JSON document (``schema_version: 1``)
with SI units throughout: volts (line-to-neutral), ohms, amperes, meters,
kVA/kvar for equipment sizes.  A feeder is a radial graph of buses joined
by line segments and single-phase distribution transformers; loads (ZIP
aggregates and houses with air conditioners) attach to buses.  Models are
immutable once loaded or populated; the engine copies any state it mutates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from feedersim.errors import SchemaError, SizingError, TopologyError
from feedersim.hvac import HouseParams
from feedersim.transformer import RATING_RANGE_KVA, XfmrThermalParams, resolve_params

PHASES = ("A", "B", "C")
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class LoadRef:
    """Reference from a bus to an attached load."""

    kind: str  # "zip" or "house"
    ref: str


@dataclass(frozen=True)
class Bus:
    id: str
    phases: tuple[str, ...]
    is_service_node: bool = False
    attached_loads: tuple[LoadRef, ...] = ()


@dataclass(frozen=True)
class LineSegment:
    id: str
    from_bus: str
    to_bus: str
    length_m: float
    ampacity_a: float
    impedance_ohm: dict[str, complex]  # per-phase series r + jx


@dataclass(frozen=True)
class DistributionTransformer:
    id: str
    bus_primary: str
    bus_secondary: str
    phase: str
    rating_kva: float
    impedance_pu: complex        # on the transformer's own rating base
    secondary_voltage: float = 120.0  # volts line-to-neutral
    planning_load_kva: float | None = None
    thermal: XfmrThermalParams | None = None

    def thermal_params(self) -> XfmrThermalParams:
        return resolve_params(self.thermal, self.rating_kva)


@dataclass(frozen=True)
class CapControl:
    mode: str  # "fixed" or "voltage"
    v_on: float | None = None     # p.u.; switch in below this
    v_off: float | None = None    # p.u.; switch out above this
    sense_bus: str | None = None
    sense_phase: str | None = None


@dataclass(frozen=True)
class CapacitorBank:
    id: str
    bus: str
    kvar: dict[str, float]  # per-phase rated reactive injection
    control: CapControl
    on: bool = True         # all phases switch together


@dataclass(frozen=True)
class Fuse:
    id: str
    line: str
    current_limit_a: float
    closed: bool = True


@dataclass(frozen=True)
class ZipLoad:
    id: str
    bus: str
    phase: str
    base_kva: float
    power_factor: float
    zip_real: tuple[float, float, float]      # impedance/current/power fractions
    zip_reactive: tuple[float, float, float]


@dataclass(frozen=True)
class House:
    id: str
    bus: str
    phase: str
    transformer: str
    q_gain_kw: float  # constant internal gains
    params: HouseParams


@dataclass
class FeederModel:
    """Immutable-by-convention container for one radial feeder."""

    name: str
    nominal_voltage: float        # volts line-to-neutral, primary side
    slack_bus_id: str
    buses: tuple[Bus, ...]
    lines: tuple[LineSegment, ...] = ()
    transformers: tuple[DistributionTransformer, ...] = ()
    capacitors: tuple[CapacitorBank, ...] = ()
    fuses: tuple[Fuse, ...] = ()
    zip_loads: tuple[ZipLoad, ...] = ()
    houses: tuple[House, ...] = ()
    slack_voltage_pu: float = 1.0
    power_base_kva: float = 100.0  # per-phase base for p.u. mismatch/flows

    def __post_init__(self):
        refs: dict[str, list[LoadRef]] = {}
        for z in self.zip_loads:
            refs.setdefault(z.bus, []).append(LoadRef("zip", z.id))
        for h in self.houses:
            refs.setdefault(h.bus, []).append(LoadRef("house", h.id))
        self.buses = tuple(replace(b, attached_loads=tuple(refs.get(b.id, ())))
                           for b in self.buses)
        self._bus_index = {b.id: b for b in self.buses}
        self._line_index = {l.id: l for l in self.lines}
        self._xfmr_index = {t.id: t for t in self.transformers}

    def bus(self, bus_id: str) -> Bus:
        return self._bus_index[bus_id]

    def line(self, line_id: str) -> LineSegment:
        return self._line_index[line_id]

    def transformer(self, xfmr_id: str) -> DistributionTransformer:
        return self._xfmr_index[xfmr_id]

    def edges(self) -> list[tuple[str, str, str, str]]:
        """(kind, id, from_bus, to_bus) for every line and transformer."""
        out = [("line", l.id, l.from_bus, l.to_bus) for l in self.lines]
        out += [("xfmr", t.id, t.bus_primary, t.bus_secondary)
                for t in self.transformers]
        return out

    def validate(self) -> None:
        """Check every structural invariant; raises SchemaError/TopologyError."""
        _validate(self)


# ---------------------------------------------------------------------------
# validation


def _fail(where: str, msg: str):
    raise SchemaError(f"{where}: {msg}")


def _validate(f: FeederModel) -> None:
    if f.nominal_voltage <= 0:
        _fail("feeder", "nominal_voltage must be positive")
    if f.power_base_kva <= 0:
        _fail("feeder", "power_base_kva must be positive")
    seen = set()
    for b in f.buses:
        if b.id in seen:
            _fail(f"buses (id={b.id})", "duplicate bus id")
        seen.add(b.id)
        if not b.phases or any(p not in PHASES for p in b.phases):
            _fail(f"buses (id={b.id})", f"phases must be a nonempty subset of "
                  f"{PHASES}, got {b.phases}")
    if f.slack_bus_id not in f._bus_index:
        _fail("feeder.slack_bus_id", f"unknown bus {f.slack_bus_id!r}")

    for i, l in enumerate(f.lines):
        where = f"lines[{i}] (id={l.id})"
        for end in (l.from_bus, l.to_bus):
            if end not in f._bus_index:
                _fail(where, f"unknown bus {end!r}")
        if l.ampacity_a <= 0:
            _fail(where, "ampacity_a must be positive")
        if not l.impedance_ohm:
            _fail(where, "impedance_ohm must list at least one phase")
        for p, z in l.impedance_ohm.items():
            if p not in f.bus(l.from_bus).phases or p not in f.bus(l.to_bus).phases:
                _fail(where, f"phase {p} not present on both end buses")
            if z.real < 0:
                _fail(where, f"phase {p} resistance must be nonnegative")

    for i, t in enumerate(f.transformers):
        where = f"transformers[{i}] (id={t.id})"
        for end in (t.bus_primary, t.bus_secondary):
            if end not in f._bus_index:
                _fail(where, f"unknown bus {end!r}")
        if t.phase not in f.bus(t.bus_primary).phases:
            _fail(where, f"phase {t.phase} not present on primary bus")
        if tuple(f.bus(t.bus_secondary).phases) != (t.phase,):
            _fail(where, "secondary bus must carry exactly the transformer phase")
        if t.rating_kva <= 0:
            _fail(where, "rating_kva must be positive")
        if t.impedance_pu.real < 0:
            _fail(where, "impedance resistance must be nonnegative")
        if t.secondary_voltage <= 0:
            _fail(where, "secondary_voltage must be positive")
        lo, hi = RATING_RANGE_KVA
        if t.thermal is None and not lo <= t.rating_kva <= hi:
            _fail(where, f"rating outside [{lo}, {hi}] kVA requires explicit "
                  "thermal parameters")

    for i, c in enumerate(f.capacitors):
        where = f"capacitors[{i}] (id={c.id})"
        if c.bus not in f._bus_index:
            _fail(where, f"unknown bus {c.bus!r}")
        for p in c.kvar:
            if p not in f.bus(c.bus).phases:
                _fail(where, f"phase {p} not present on bus")
        if c.control.mode not in ("fixed", "voltage"):
            _fail(where, f"unknown control mode {c.control.mode!r}")
        if c.control.mode == "voltage":
            ctl = c.control
            if ctl.v_on is None or ctl.v_off is None or ctl.sense_bus is None:
                _fail(where, "voltage control requires v_on, v_off, sense_bus")
            if not ctl.v_on < ctl.v_off:
                _fail(where, "v_on must be below v_off")
            if ctl.sense_bus not in f._bus_index:
                _fail(where, f"unknown sense bus {ctl.sense_bus!r}")
            if ctl.sense_phase not in f.bus(ctl.sense_bus).phases:
                _fail(where, f"sense phase {ctl.sense_phase!r} not on sense bus")

    for i, fu in enumerate(f.fuses):
        where = f"fuses[{i}] (id={fu.id})"
        if fu.line not in f._line_index:
            _fail(where, f"unknown line {fu.line!r}")
        if fu.current_limit_a <= 0:
            _fail(where, "current_limit_a must be positive")

    for i, z in enumerate(f.zip_loads):
        where = f"zip_loads[{i}] (id={z.id})"
        if z.bus not in f._bus_index:
            _fail(where, f"unknown bus {z.bus!r}")
        if z.phase not in f.bus(z.bus).phases:
            _fail(where, f"phase {z.phase} not present on bus")
        if z.base_kva < 0:
            _fail(where, "base_kva must be nonnegative")
        if not 0 < z.power_factor <= 1:
            _fail(where, "power_factor must be in (0, 1]")
        for name, trio in (("zip_real", z.zip_real), ("zip_reactive", z.zip_reactive)):
            if abs(sum(trio) - 1.0) > 1e-9:
                _fail(where, f"{name} fractions must sum to 1, got {sum(trio)}")

    for i, h in enumerate(f.houses):
        where = f"houses[{i}] (id={h.id})"
        if h.bus not in f._bus_index:
            _fail(where, f"unknown bus {h.bus!r}")
        if h.phase not in f.bus(h.bus).phases:
            _fail(where, f"phase {h.phase} not present on bus")
        if h.transformer not in f._xfmr_index:
            _fail(where, f"unknown transformer {h.transformer!r}")
        if f.transformer(h.transformer).bus_secondary != h.bus:
            _fail(where, "house bus must be its transformer's secondary bus")
        if h.q_gain_kw < 0:
            _fail(where, "q_gain_kw must be nonnegative")

    _check_radial(f)
    _check_phase_connectivity(f)


def _check_radial(f: FeederModel) -> None:
    edges = f.edges()
    n_buses = len(f.buses)
    adjacency: dict[str, list[tuple[str, int]]] = {b.id: [] for b in f.buses}
    for k, (_, _, a, b) in enumerate(edges):
        adjacency[a].append((b, k))
        adjacency[b].append((a, k))

    # DFS from the slack; a visited non-parent neighbor closes a cycle
    parent_edge: dict[str, int | None] = {f.slack_bus_id: None}
    parent_bus: dict[str, str | None] = {f.slack_bus_id: None}
    stack = [f.slack_bus_id]
    while stack:
        bus = stack.pop()
        for nbr, k in adjacency[bus]:
            if k == parent_edge[bus]:
                continue
            if nbr in parent_edge:
                cycle = _trace_cycle(parent_bus, bus, nbr)
                raise TopologyError(
                    "feeder graph is not radial; cycle through buses "
                    + " -> ".join(cycle))
            parent_edge[nbr] = k
            parent_bus[nbr] = bus
            stack.append(nbr)

    if len(parent_edge) != n_buses:
        missing = sorted(b.id for b in f.buses if b.id not in parent_edge)
        raise TopologyError(
            f"feeder graph is not connected; unreachable buses: {missing}")
    if len(edges) != n_buses - 1:
        raise TopologyError(
            f"radial feeder needs exactly {n_buses - 1} edges for {n_buses} "
            f"buses, found {len(edges)} (parallel edges present)")


def _trace_cycle(parent_bus, a: str, b: str) -> list[str]:
    path_a = [a]
    while parent_bus.get(path_a[-1]) is not None:
        path_a.append(parent_bus[path_a[-1]])
    ancestors = {bus: i for i, bus in enumerate(path_a)}
    path_b = [b]
    while path_b[-1] not in ancestors:
        path_b.append(parent_bus[path_b[-1]])
    join = path_b[-1]
    return path_a[:ancestors[join] + 1] + path_b[-2::-1] + [a]


def _check_phase_connectivity(f: FeederModel) -> None:
    for phase in PHASES:
        carriers = {b.id for b in f.buses if phase in b.phases}
        if not carriers:
            continue
        if f.slack_bus_id not in carriers:
            raise TopologyError(f"slack bus does not carry phase {phase} "
                                "but other buses do")
        adjacency: dict[str, list[str]] = {b: [] for b in carriers}
        for l in f.lines:
            if phase in l.impedance_ohm:
                adjacency[l.from_bus].append(l.to_bus)
                adjacency[l.to_bus].append(l.from_bus)
        for t in f.transformers:
            if t.phase == phase:
                adjacency[t.bus_primary].append(t.bus_secondary)
                adjacency[t.bus_secondary].append(t.bus_primary)
        seen = {f.slack_bus_id}
        stack = [f.slack_bus_id]
        while stack:
            for nbr in adjacency[stack.pop()]:
                if nbr not in seen:
                    seen.add(nbr)
                    stack.append(nbr)
        missing = sorted(carriers - seen)
        if missing:
            raise TopologyError(
                f"buses {missing} carry phase {phase} but have no phase-{phase} "
                "path to the slack bus")


# ---------------------------------------------------------------------------
# schema (de)serialization


def _pair(z: complex) -> list[float]:
    return [z.real, z.imag]


def to_dict(f: FeederModel) -> dict:
    """Schema-shaped plain dict; stable field ordering for byte-stable dumps."""
    return {
        "schema_version": SCHEMA_VERSION,
        "name": f.name,
        "nominal_voltage": f.nominal_voltage,
        "slack_bus_id": f.slack_bus_id,
        "slack_voltage_pu": f.slack_voltage_pu,
        "power_base_kva": f.power_base_kva,
        "buses": [{"id": b.id, "phases": "".join(b.phases),
                   "is_service_node": b.is_service_node} for b in f.buses],
        "lines": [{"id": l.id, "from_bus": l.from_bus, "to_bus": l.to_bus,
                   "length_m": l.length_m, "ampacity_a": l.ampacity_a,
                   "impedance_ohm": {p: _pair(z) for p, z in l.impedance_ohm.items()}}
                  for l in f.lines],
        "transformers": [{
            "id": t.id, "bus_primary": t.bus_primary,
            "bus_secondary": t.bus_secondary, "phase": t.phase,
            "rating_kva": t.rating_kva, "impedance_pu": _pair(t.impedance_pu),
            "secondary_voltage": t.secondary_voltage,
            "planning_load_kva": t.planning_load_kva,
            "thermal": None if t.thermal is None else {
                "winding_tau_s": t.thermal.winding_tau_s,
                "rated_winding_rise_c": t.thermal.rated_winding_rise_c,
                "rated_oil_rise_c": t.thermal.rated_oil_rise_c,
                "full_load_loss_pu": t.thermal.full_load_loss_pu,
                "no_load_loss_pu": t.thermal.no_load_loss_pu,
                "oil_volume_gal": t.thermal.oil_volume_gal,
                "core_coil_weight_lb": t.thermal.core_coil_weight_lb,
                "tank_fittings_weight_lb": t.thermal.tank_fittings_weight_lb,
            }} for t in f.transformers],
        "capacitors": [{
            "id": c.id, "bus": c.bus, "kvar": dict(c.kvar),
            "control": ({"mode": "fixed"} if c.control.mode == "fixed" else {
                "mode": "voltage", "v_on": c.control.v_on,
                "v_off": c.control.v_off, "sense_bus": c.control.sense_bus,
                "sense_phase": c.control.sense_phase}),
            "on": c.on} for c in f.capacitors],
        "fuses": [{"id": fu.id, "line": fu.line,
                   "current_limit_a": fu.current_limit_a, "closed": fu.closed}
                  for fu in f.fuses],
        "zip_loads": [{"id": z.id, "bus": z.bus, "phase": z.phase,
                       "base_kva": z.base_kva, "power_factor": z.power_factor,
                       "zip_real": list(z.zip_real),
                       "zip_reactive": list(z.zip_reactive)}
                      for z in f.zip_loads],
        "houses": [{"id": h.id, "bus": h.bus, "phase": h.phase,
                    "transformer": h.transformer, "q_gain_kw": h.q_gain_kw,
                    "params": {
                        "c_air": h.params.c_air, "c_mass": h.params.c_mass,
                        "ua": h.params.ua, "hm": h.params.hm,
                        "r_gain": h.params.r_gain,
                        "deadband_low": h.params.deadband_low,
                        "deadband_high": h.params.deadband_high,
                        "q_ac_kw": h.params.q_ac_kw,
                        "power_kw": h.params.power_kw,
                        "power_factor": h.params.power_factor,
                    }} for h in f.houses],
    }


def _need(obj: dict, key: str, where: str):
    if key not in obj:
        _fail(where, f"missing required field {key!r}")
    return obj[key]


def _complex_pair(val, where: str, key: str) -> complex:
    if (not isinstance(val, (list, tuple)) or len(val) != 2
            or not all(isinstance(x, (int, float)) for x in val)):
        _fail(where, f"{key} must be a [r, x] number pair")
    return complex(val[0], val[1])


def from_dict(doc: dict) -> FeederModel:
    """Build a FeederModel from a schema dict; structural errors name the field."""
    if not isinstance(doc, dict):
        raise SchemaError("feeder document must be a JSON object")
    version = _need(doc, "schema_version", "feeder")
    if version != SCHEMA_VERSION:
        _fail("feeder.schema_version", f"unsupported version {version}")

    buses = []
    for i, b in enumerate(doc.get("buses", [])):
        where = f"buses[{i}]"
        phases = _need(b, "phases", where)
        buses.append(Bus(id=str(_need(b, "id", where)),
                         phases=tuple(phases),
                         is_service_node=bool(b.get("is_service_node", False))))

    lines = []
    for i, l in enumerate(doc.get("lines", [])):
        where = f"lines[{i}]"
        imp = {p: _complex_pair(v, where, f"impedance_ohm[{p}]")
               for p, v in _need(l, "impedance_ohm", where).items()}
        lines.append(LineSegment(
            id=str(_need(l, "id", where)), from_bus=str(_need(l, "from_bus", where)),
            to_bus=str(_need(l, "to_bus", where)),
            length_m=float(l.get("length_m", 0.0)),
            ampacity_a=float(_need(l, "ampacity_a", where)), impedance_ohm=imp))

    xfmrs = []
    for i, t in enumerate(doc.get("transformers", [])):
        where = f"transformers[{i}]"
        thermal = None
        if t.get("thermal") is not None:
            th = t["thermal"]
            try:
                thermal = XfmrThermalParams(**th)
            except (TypeError, ValueError) as exc:
                _fail(f"{where}.thermal", str(exc))
        xfmrs.append(DistributionTransformer(
            id=str(_need(t, "id", where)),
            bus_primary=str(_need(t, "bus_primary", where)),
            bus_secondary=str(_need(t, "bus_secondary", where)),
            phase=str(_need(t, "phase", where)),
            rating_kva=float(_need(t, "rating_kva", where)),
            impedance_pu=_complex_pair(_need(t, "impedance_pu", where), where,
                                       "impedance_pu"),
            secondary_voltage=float(t.get("secondary_voltage", 120.0)),
            planning_load_kva=(None if t.get("planning_load_kva") is None
                               else float(t["planning_load_kva"])),
            thermal=thermal))

    caps = []
    for i, c in enumerate(doc.get("capacitors", [])):
        where = f"capacitors[{i}]"
        ctl = _need(c, "control", where)
        mode = _need(ctl, "mode", f"{where}.control")
        control = CapControl(mode=mode)
        if mode == "voltage":
            control = CapControl(
                mode="voltage", v_on=float(_need(ctl, "v_on", f"{where}.control")),
                v_off=float(_need(ctl, "v_off", f"{where}.control")),
                sense_bus=str(_need(ctl, "sense_bus", f"{where}.control")),
                sense_phase=str(ctl.get("sense_phase", "A")))
        caps.append(CapacitorBank(
            id=str(_need(c, "id", where)), bus=str(_need(c, "bus", where)),
            kvar={p: float(v) for p, v in _need(c, "kvar", where).items()},
            control=control, on=bool(c.get("on", True))))

    fuses = []
    for i, fu in enumerate(doc.get("fuses", [])):
        where = f"fuses[{i}]"
        fuses.append(Fuse(id=str(_need(fu, "id", where)),
                          line=str(_need(fu, "line", where)),
                          current_limit_a=float(_need(fu, "current_limit_a", where)),
                          closed=bool(fu.get("closed", True))))

    zips = []
    for i, z in enumerate(doc.get("zip_loads", [])):
        where = f"zip_loads[{i}]"
        zips.append(ZipLoad(
            id=str(_need(z, "id", where)), bus=str(_need(z, "bus", where)),
            phase=str(_need(z, "phase", where)),
            base_kva=float(_need(z, "base_kva", where)),
            power_factor=float(z.get("power_factor", 0.95)),
            zip_real=tuple(float(x) for x in _need(z, "zip_real", where)),
            zip_reactive=tuple(float(x) for x in _need(z, "zip_reactive", where))))

    houses = []
    for i, h in enumerate(doc.get("houses", [])):
        where = f"houses[{i}]"
        pd = _need(h, "params", where)
        try:
            params = HouseParams(**pd)
        except (TypeError, ValueError) as exc:
            _fail(f"{where}.params", str(exc))
        houses.append(House(
            id=str(_need(h, "id", where)), bus=str(_need(h, "bus", where)),
            phase=str(_need(h, "phase", where)),
            transformer=str(_need(h, "transformer", where)),
            q_gain_kw=float(h.get("q_gain_kw", 0.0)), params=params))

    return FeederModel(
        name=str(doc.get("name", "feeder")),
        nominal_voltage=float(_need(doc, "nominal_voltage", "feeder")),
        slack_bus_id=str(_need(doc, "slack_bus_id", "feeder")),
        buses=tuple(buses), lines=tuple(lines), transformers=tuple(xfmrs),
        capacitors=tuple(caps), fuses=tuple(fuses), zip_loads=tuple(zips),
        houses=tuple(houses),
        slack_voltage_pu=float(doc.get("slack_voltage_pu", 1.0)),
        power_base_kva=float(doc.get("power_base_kva", 100.0)))


def load_feeder(path) -> FeederModel:
    """Load, parse, and validate a feeder file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise SchemaError(f"feeder file not found: {path}")
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})")
    feeder = from_dict(doc)
    feeder.validate()
    return feeder


def save_feeder(feeder: FeederModel, path) -> None:
    """Write the schema document; identical models produce identical bytes."""
    Path(path).write_text(json.dumps(to_dict(feeder), indent=2) + "\n")


# ---------------------------------------------------------------------------
# synthetic house populator


@dataclass(frozen=True)
class PopulatorConfig:
    """Randomization ranges for the synthetic house populator.

    Thermal parameters are drawn uniformly within +-`thermal_spread` of the
    nominal values; setpoints and deadbands are drawn from their ranges.
    Cooling capacity is sized so each house lands near a drawn duty-cycle
    target at the design ambient, then quantized to the unit-size step.
    """

    c_air_nominal: float = 2400.0    # kJ/degC
    c_mass_nominal: float = 9600.0   # kJ/degC
    ua_nominal: float = 0.48         # kW/degC
    hm_nominal: float = 1.40         # kW/degC
    thermal_spread: float = 0.20
    r_gain_range: tuple[float, float] = (0.4, 0.6)
    setpoint_range_c: tuple[float, float] = (20.0, 24.0)
    deadband_range_c: tuple[float, float] = (0.5, 1.5)
    q_gain_range_kw: tuple[float, float] = (0.3, 1.2)
    duty_target_range: tuple[float, float] = (0.35, 0.65)
    design_ambient_c: float = 35.0
    cop: float = 3.0                   # electrical kW = q_ac_kw / cop
    ac_size_step_kw: float = 1.7584    # half-ton of thermal capacity
    power_factor: float = 0.97
    zip_base_kva_range: tuple[float, float] = (0.5, 2.0)
    zip_power_factor: float = 0.95
    zip_fractions: tuple[float, float, float] = (0.2, 0.3, 0.5)
    per_house_peak_kva: float = 4.0    # initial sizing guess

    @classmethod
    def from_file(cls, path) -> "PopulatorConfig":
        doc = json.loads(Path(path).read_text())
        fields = {}
        for key, val in doc.items():
            if not hasattr(cls, key):
                raise SchemaError(f"populator config: unknown field {key!r}")
            fields[key] = tuple(val) if isinstance(val, list) else val
        return cls(**fields)


def _draw_house(xfmr: DistributionTransformer, h_idx: int, seed: int,
                cfg: PopulatorConfig, xfmr_idx: int) -> tuple[House, ZipLoad]:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0, xfmr_idx, h_idx)))
    spread = cfg.thermal_spread

    def jitter(nominal):
        return nominal * (1.0 + rng.uniform(-spread, spread))

    setpoint = rng.uniform(*cfg.setpoint_range_c)
    deadband = rng.uniform(*cfg.deadband_range_c)
    ua = jitter(cfg.ua_nominal)
    q_gain = rng.uniform(*cfg.q_gain_range_kw)
    duty_target = rng.uniform(*cfg.duty_target_range)
    steady_inflow = ua * (cfg.design_ambient_c - setpoint) + q_gain  # kW
    q_ac = max(cfg.ac_size_step_kw,
               math.ceil(steady_inflow / duty_target / cfg.ac_size_step_kw)
               * cfg.ac_size_step_kw)
    params = HouseParams(
        c_air=jitter(cfg.c_air_nominal), c_mass=jitter(cfg.c_mass_nominal),
        ua=ua, hm=jitter(cfg.hm_nominal),
        r_gain=rng.uniform(*cfg.r_gain_range),
        deadband_low=setpoint - deadband / 2.0,
        deadband_high=setpoint + deadband / 2.0,
        q_ac_kw=q_ac, power_kw=q_ac / cfg.cop, power_factor=cfg.power_factor)
    house = House(id=f"{xfmr.id}_h{h_idx}", bus=xfmr.bus_secondary,
                  phase=xfmr.phase, transformer=xfmr.id,
                  q_gain_kw=q_gain, params=params)
    zipload = ZipLoad(id=f"{xfmr.id}_z{h_idx}", bus=xfmr.bus_secondary,
                      phase=xfmr.phase,
                      base_kva=rng.uniform(*cfg.zip_base_kva_range),
                      power_factor=cfg.zip_power_factor,
                      zip_real=cfg.zip_fractions,
                      zip_reactive=cfg.zip_fractions)
    return house, zipload


def _allocate_counts(transformers, total: int) -> dict[str, int]:
    """Spread `total` houses over transformers, balancing the three phases.

    The per-phase share is as even as the phase split allows; within one
    phase, counts follow planning loads with largest-remainder rounding.
    """
    by_phase: dict[str, list[DistributionTransformer]] = {}
    for t in transformers:
        by_phase.setdefault(t.phase, []).append(t)
    phases = sorted(by_phase)
    base, extra = divmod(total, len(phases))
    counts: dict[str, int] = {}
    for j, phase in enumerate(phases):
        group = by_phase[phase]
        n_phase = base + (1 if j < extra else 0)
        weights = np.array([t.planning_load_kva for t in group], dtype=float)
        shares = weights / weights.sum() * n_phase
        floor = np.floor(shares).astype(int)
        remainder = n_phase - int(floor.sum())
        order = np.argsort(-(shares - floor), kind="stable")
        for k in range(remainder):
            floor[order[k]] += 1
        for t, c in zip(group, floor):
            counts[t.id] = int(c)
    return counts


def _design_day_weather(cfg: PopulatorConfig):
    from feedersim.engine import WeatherSeries
    hours = np.arange(25.0)
    mean = cfg.design_ambient_c - 5.5
    temps = mean + 5.5 * np.sin((hours - 9.0) / 24.0 * 2.0 * np.pi)
    return WeatherSeries(times_s=hours * 3600.0, temps_c=temps)


def populate_houses(feeder: FeederModel, target_peak_kva: float, seed: int,
                    config: PopulatorConfig | None = None, weather=None,
                    max_rounds: int = 20) -> FeederModel:
    """Attach houses under the transformers until the simulated peak-hour
    load lands in [0.90, 1.00] x `target_peak_kva`.

    House counts are allocated per transformer from the annotated planning
    loads with the three phases balanced; each house's parameters depend
    only on (seed, transformer, slot), so growing or shrinking the count
    between rounds keeps previously drawn houses identical.  The peak is
    measured by the engine's coarse uncontrolled scan over `weather` (a
    built-in hot design day when omitted).  Deterministic under a fixed
    seed.  Raises SizingError when the band cannot be reached.
    """
    from feedersim import engine as _engine

    cfg = config or PopulatorConfig()
    if target_peak_kva <= 0:
        raise ValueError("target_peak_kva must be positive")
    with_planning = [t for t in feeder.transformers if t.planning_load_kva]
    if not with_planning:
        raise SchemaError("populate_houses requires transformers with "
                          "planning_load_kva annotations")
    if weather is None:
        weather = _design_day_weather(cfg)

    def peak_of(model: FeederModel) -> float:
        _, hourly = _engine.scan_hourly_head_kva(model, weather, seed=seed)
        return float(hourly.max()) if len(hourly) else 0.0

    lo, hi = 0.90 * target_peak_kva, 1.00 * target_peak_kva
    achieved = peak_of(feeder)
    if lo <= achieved <= hi:
        return feeder

    xfmr_order = {t.id: i for i, t in enumerate(feeder.transformers)}
    total = max(len(with_planning), round(target_peak_kva / cfg.per_house_peak_kva))
    for _ in range(max_rounds):
        counts = _allocate_counts(with_planning, total)
        houses, zips = [], []
        for t in with_planning:
            for h_idx in range(counts[t.id]):
                house, zipload = _draw_house(t, h_idx, seed, cfg, xfmr_order[t.id])
                houses.append(house)
                zips.append(zipload)
        candidate = FeederModel(
            name=feeder.name, nominal_voltage=feeder.nominal_voltage,
            slack_bus_id=feeder.slack_bus_id, buses=feeder.buses,
            lines=feeder.lines, transformers=feeder.transformers,
            capacitors=feeder.capacitors, fuses=feeder.fuses,
            zip_loads=feeder.zip_loads + tuple(zips), houses=tuple(houses),
            slack_voltage_pu=feeder.slack_voltage_pu,
            power_base_kva=feeder.power_base_kva)
        candidate.validate()
        achieved = peak_of(candidate)
        if lo <= achieved <= hi:
            return candidate
        scale = 0.95 * target_peak_kva / achieved if achieved > 0 else 2.0
        new_total = max(1, round(total * min(2.0, max(0.5, scale))))
        if new_total == total:
            new_total = total + (1 if achieved < lo else -1)
        total = max(1, new_total)
    raise SizingError(
        f"could not reach [{lo:.1f}, {hi:.1f}] kVA within {max_rounds} rounds; "
        f"achieved peak {achieved:.1f} kVA")
