"""Three-phase unbalanced power flow on radial feeders.

Phases are modeled as magnetically decoupled (the schema carries per-phase
series impedances only), so each phase is an independent radial network
solved by an iterative backward/forward sweep; unbalance arises from
unequal per-phase loading.  Transformers appear as ideal-ratio edges with
their series impedance referred to the secondary side, and each bus keeps
its own voltage base (primary buses at the feeder nominal, transformer
secondaries at the transformer's service voltage).  Voltages are reported
in per unit on the bus base, currents in amperes.

The module also provides the closed-form single-line voltage relation
(quartic in the receiving-end voltage) and its analytic sensitivity
decomposition with respect to regulation power injections.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from feedersim import _kernels
from feedersim.errors import PowerFlowError
from feedersim.netmodel import PHASES, FeederModel

DEFAULT_TOLERANCE_PU = 1e-8
DEFAULT_MAX_ITER = 50


class OperatingPointError(PowerFlowError):
    """The requested operating point has no physical high-voltage solution."""


# ---------------------------------------------------------------------------
# closed-form single-line voltage and sensitivities


@dataclass(frozen=True)
class DistFlowLine:
    """One radial line at an operating point, all quantities per unit.

    `p_pu`/`q_pu` are the real and reactive power received by the
    downstream bus.
    """

    v_sending: float
    r_pu: float
    x_pu: float
    p_pu: float
    q_pu: float

    def _quadratic(self) -> tuple[float, float, float]:
        # quartic in V_k reduces to a quadratic in V_k^2: y^2 + b y + c = 0
        b = 2.0 * (self.r_pu * self.p_pu + self.x_pu * self.q_pu) - self.v_sending ** 2
        c = (self.r_pu ** 2 + self.x_pu ** 2) * (self.p_pu ** 2 + self.q_pu ** 2)
        return b, c, b * b - 4.0 * c

    @property
    def discriminant(self) -> float:
        return self._quadratic()[2]


@dataclass(frozen=True)
class SensitivityTerms:
    """Decomposition of dV_downstream / dP_regulation for one line.

    `via_reactive` couples through the reactive flow at the regulation
    power factor, `via_real` through the real flow, and `via_source` is
    identically zero under the stiff-source assumption.
    """

    via_reactive: float
    via_real: float
    via_source: float
    power_factor: float
    regulation_power_pu: float = 0.0

    @property
    def total(self) -> float:
        return self.via_reactive + self.via_real + self.via_source


def distflow_voltage(line: DistFlowLine) -> float:
    """Receiving-end voltage magnitude: the high-voltage root of the quartic."""
    b, c, disc = line._quadratic()
    if disc < 0:
        raise OperatingPointError(
            f"no physical operating point: discriminant {disc:.3e} < 0")
    y = (-b + math.sqrt(disc)) / 2.0
    return math.sqrt(y)


def voltage_sensitivity(line: DistFlowLine,
                        power_factor: float = 0.97) -> SensitivityTerms:
    """Analytic dV/dP_regulation terms at the line's operating point.

    Real flow tracks regulation power one-for-one; reactive flow tracks it
    through tan(acos(power_factor)), lagging.  The sending-end voltage is
    held fixed (stiff source), so its term is zero.
    """
    if not 0.0 < power_factor <= 1.0:
        raise ValueError(f"power_factor must be in (0, 1], got {power_factor}")
    b, c, disc = line._quadratic()
    if disc <= 0:
        raise OperatingPointError(
            f"sensitivity undefined: discriminant {disc:.3e} <= 0")
    root = math.sqrt(disc)
    v_k = math.sqrt((-b + root) / 2.0)
    z_sq = line.r_pu ** 2 + line.x_pu ** 2

    # y = V_k^2 solves y^2 + b y + c = 0, so
    # dy/dflow = (-db + (b*db - 2*dc)/root) / 2 and dV = dy / (2 V_k)
    def dv_dflow(db, dc):
        dy = (-db + (b * db - 2.0 * dc) / root) / 2.0
        return dy / (2.0 * v_k)

    dv_dp = dv_dflow(2.0 * line.r_pu, 2.0 * line.p_pu * z_sq)
    dv_dq = dv_dflow(2.0 * line.x_pu, 2.0 * line.q_pu * z_sq)
    q_per_p = math.tan(math.acos(power_factor))
    return SensitivityTerms(via_reactive=dv_dq * q_per_p, via_real=dv_dp,
                            via_source=0.0, power_factor=power_factor)


# ---------------------------------------------------------------------------
# prepared network structures


@dataclass
class PhaseNetwork:
    """Flattened arrays for one phase's radial network, BFS-ordered."""

    phase: str
    node_ids: list[str]
    index: dict[str, int]
    parent: np.ndarray     # int32, -1 at the root
    order: np.ndarray      # int32, parents before children
    edge_z: np.ndarray     # complex ohms, child side of the edge to parent
    edge_tap: np.ndarray   # parent->child voltage divisor (1 for lines)
    v_nom: np.ndarray      # volts, per-node base


@dataclass
class PreparedFeeder:
    """Index structures reused across per-step solves."""

    feeder: FeederModel
    open_lines: frozenset
    networks: dict[str, PhaseNetwork]
    zip_const: dict[str, np.ndarray]   # static ZIP decomposition, VA at nominal
    zip_curr: dict[str, np.ndarray]
    zip_imp: dict[str, np.ndarray]
    cap_entries: list[tuple[int, str, int, float]]  # (cap pos, phase, node, var)
    node_of: dict[tuple[str, str], tuple[str, int]]
    line_edges: dict[tuple[str, str], tuple[str, int]]
    xfmr_edges: dict[str, tuple[str, int]]
    deenergized: frozenset
    service_keys: list[tuple[str, str]]
    service_gather: dict[str, tuple[np.ndarray, np.ndarray]]  # positions, nodes
    three_phase_buses: list[str]
    three_phase_idx: dict[str, np.ndarray]  # per phase, aligned with the bus list

    def zero_loads(self) -> dict[str, np.ndarray]:
        return {p: np.zeros(len(net.parent), dtype=np.complex128)
                for p, net in self.networks.items()}


def prepare(feeder: FeederModel,
            open_lines: frozenset = frozenset()) -> PreparedFeeder:
    """Build per-phase sweep arrays and gather indices for a feeder."""
    networks: dict[str, PhaseNetwork] = {}
    deenergized = set()
    for phase in PHASES:
        carriers = [b for b in feeder.buses if phase in b.phases]
        if not carriers:
            continue
        adjacency: dict[str, list[tuple[str, complex, float]]] = {
            b.id: [] for b in carriers}
        for l in feeder.lines:
            if phase in l.impedance_ohm and l.id not in open_lines:
                z = l.impedance_ohm[phase]
                adjacency[l.from_bus].append((l.to_bus, z, 1.0))
                adjacency[l.to_bus].append((l.from_bus, z, 1.0))
        for t in feeder.transformers:
            if t.phase == phase:
                z_base = t.secondary_voltage ** 2 / (t.rating_kva * 1000.0)
                z = t.impedance_pu * z_base
                tap = feeder.nominal_voltage / t.secondary_voltage
                adjacency[t.bus_primary].append((t.bus_secondary, z, tap))
                adjacency[t.bus_secondary].append((t.bus_primary, z, 1.0 / tap))

        node_ids = [feeder.slack_bus_id]
        index = {feeder.slack_bus_id: 0}
        parent = [-1]
        edge_z = [0j]
        edge_tap = [1.0]
        queue = deque([feeder.slack_bus_id])
        while queue:
            bus = queue.popleft()
            for nbr, z, tap in adjacency[bus]:
                if nbr in index:
                    continue
                index[nbr] = len(node_ids)
                node_ids.append(nbr)
                parent.append(index[bus])
                edge_z.append(z)
                edge_tap.append(tap)
                queue.append(nbr)
        deenergized.update((b.id, phase) for b in carriers if b.id not in index)

        v_nom = np.full(len(node_ids), feeder.nominal_voltage)
        for t in feeder.transformers:
            if t.phase == phase and t.bus_secondary in index:
                v_nom[index[t.bus_secondary]] = t.secondary_voltage
        networks[phase] = PhaseNetwork(
            phase=phase, node_ids=node_ids, index=index,
            parent=np.array(parent, dtype=np.int32),
            order=np.arange(len(node_ids), dtype=np.int32),  # BFS == level order
            edge_z=np.array(edge_z, dtype=np.complex128),
            edge_tap=np.array(edge_tap, dtype=np.float64),
            v_nom=v_nom)

    node_of = {}
    for phase, net in networks.items():
        for bus, i in net.index.items():
            node_of[(bus, phase)] = (phase, i)

    zip_const = {p: np.zeros(len(net.parent), dtype=np.complex128)
                 for p, net in networks.items()}
    zip_curr = {p: z.copy() for p, z in zip_const.items()}
    zip_imp = {p: z.copy() for p, z in zip_const.items()}
    for z in feeder.zip_loads:
        key = (z.bus, z.phase)
        if key not in node_of:
            continue  # de-energized
        phase, idx = node_of[key]
        base_va = z.base_kva * 1000.0
        s0 = complex(base_va * z.power_factor,
                     base_va * math.sqrt(max(0.0, 1.0 - z.power_factor ** 2)))
        for frac_r, frac_x, target in zip(
                (z.zip_real[2], z.zip_real[1], z.zip_real[0]),
                (z.zip_reactive[2], z.zip_reactive[1], z.zip_reactive[0]),
                (zip_const, zip_curr, zip_imp)):
            target[phase][idx] += complex(s0.real * frac_r, s0.imag * frac_x)

    cap_entries = []
    for pos, c in enumerate(feeder.capacitors):
        for phase, kvar in c.kvar.items():
            key = (c.bus, phase)
            if key in node_of:
                _, idx = node_of[key]
                cap_entries.append((pos, phase, idx, kvar * 1000.0))

    line_edges = {}
    for l in feeder.lines:
        if l.id in open_lines:
            continue
        for phase in l.impedance_ohm:
            if (l.from_bus, phase) not in node_of or (l.to_bus, phase) not in node_of:
                continue
            net = networks[phase]
            i_from, i_to = net.index[l.from_bus], net.index[l.to_bus]
            child = i_to if net.parent[i_to] == i_from else i_from
            line_edges[(l.id, phase)] = (phase, child)

    xfmr_edges = {}
    for t in feeder.transformers:
        key = (t.bus_secondary, t.phase)
        if key in node_of:
            xfmr_edges[t.id] = node_of[key]

    service_keys = []
    for b in feeder.buses:
        if b.is_service_node:
            for phase in b.phases:
                if (b.id, phase) in node_of:
                    service_keys.append((b.id, phase))
    service_gather = {}
    for phase in networks:
        positions = np.array([k for k, (b, p) in enumerate(service_keys)
                              if p == phase], dtype=np.intp)
        nodes = np.array([node_of[service_keys[k]][1] for k in positions],
                         dtype=np.intp)
        service_gather[phase] = (positions, nodes)

    three_phase_buses = [b.id for b in feeder.buses
                         if set(PHASES) <= set(b.phases)
                         and all((b.id, p) in node_of for p in PHASES)]
    three_phase_idx = {
        p: np.array([node_of[(bus, p)][1] for bus in three_phase_buses],
                    dtype=np.intp)
        for p in networks}

    return PreparedFeeder(
        feeder=feeder, open_lines=open_lines, networks=networks,
        zip_const=zip_const, zip_curr=zip_curr, zip_imp=zip_imp,
        cap_entries=cap_entries, node_of=node_of, line_edges=line_edges,
        xfmr_edges=xfmr_edges, deenergized=frozenset(deenergized),
        service_keys=service_keys, service_gather=service_gather,
        three_phase_buses=three_phase_buses, three_phase_idx=three_phase_idx)


# ---------------------------------------------------------------------------
# solution


@dataclass
class PowerFlowSolution:
    """Converged (or diagnostic) state of one power-flow solve."""

    converged: bool
    iterations: int
    max_mismatch_pu: float
    worst_bus: str | None
    prepared: PreparedFeeder
    v: dict[str, np.ndarray]             # volts, per phase network
    edge_current: dict[str, np.ndarray]  # amps, child side of each edge
    transformer_kva: np.ndarray          # aligned with feeder.transformers
    feeder_head_kva: float

    def voltage_pu(self, bus: str, phase: str) -> complex:
        """Complex voltage in per unit on the bus base; 0 when de-energized."""
        key = (bus, phase)
        if key in self.prepared.deenergized:
            return 0j
        ph, idx = self.prepared.node_of[key]
        net = self.prepared.networks[ph]
        return complex(self.v[ph][idx] / net.v_nom[idx])

    def line_current_a(self, line_id: str, phase: str) -> complex:
        key = (line_id, phase)
        if key not in self.prepared.line_edges:
            return 0j
        ph, child = self.prepared.line_edges[key]
        return complex(self.edge_current[ph][child])

    def transformer_kva_of(self, xfmr_id: str) -> float:
        for i, t in enumerate(self.prepared.feeder.transformers):
            if t.id == xfmr_id:
                return float(self.transformer_kva[i])
        raise KeyError(xfmr_id)

    def service_voltages_pu(self) -> np.ndarray:
        """|V| p.u. aligned with prepared.service_keys."""
        out = np.empty(len(self.prepared.service_keys))
        for phase, (positions, nodes) in self.prepared.service_gather.items():
            net = self.prepared.networks[phase]
            out[positions] = np.abs(self.v[phase][nodes]) / net.v_nom[nodes]
        return out


def solve_arrays(prepared: PreparedFeeder,
                 extra_const_va: dict[str, np.ndarray] | None = None,
                 cap_on=None,
                 tolerance: float = DEFAULT_TOLERANCE_PU,
                 max_iter: int = DEFAULT_MAX_ITER) -> PowerFlowSolution:
    """Sweep-solve all phases from prebuilt arrays (the engine's hot path).

    `extra_const_va` adds constant-power VA per phase node on top of the
    feeder's static ZIP loads; `cap_on` gives per-capacitor states (feeder
    file states when omitted).
    """
    feeder = prepared.feeder
    if cap_on is None:
        cap_on = [c.on for c in feeder.capacitors]
    s_base_va = feeder.power_base_kva * 1000.0
    v_root = feeder.slack_voltage_pu * feeder.nominal_voltage

    imp = {p: arr.copy() for p, arr in prepared.zip_imp.items()}
    for pos, phase, idx, var in prepared.cap_entries:
        if cap_on[pos]:
            imp[phase][idx] += complex(0.0, -var)

    v = {}
    currents = {}
    converged = True
    iterations = 0
    mismatch = 0.0
    worst_key = None
    for phase, net in prepared.networks.items():
        s_const = prepared.zip_const[phase]
        if extra_const_va is not None:
            s_const = s_const + extra_const_va[phase]
        vp, ip, iters, mm, worst = _kernels.sweep_solve(
            net.parent, net.order, net.edge_z, net.edge_tap,
            s_const, prepared.zip_curr[phase], imp[phase],
            net.v_nom, complex(v_root), s_base_va, tolerance, max_iter)
        v[phase] = vp
        currents[phase] = ip
        iterations = max(iterations, iters)
        if mm > mismatch:
            mismatch = mm
            worst_key = net.node_ids[worst] if worst >= 0 else None
        if mm >= tolerance:
            converged = False

    xfmr_kva = np.zeros(len(feeder.transformers))
    for i, t in enumerate(feeder.transformers):
        if t.id in prepared.xfmr_edges:
            phase, child = prepared.xfmr_edges[t.id]
            s = v[phase][child] * np.conj(currents[phase][child])
            xfmr_kva[i] = abs(s) / 1000.0

    head_va = 0.0
    for phase, net in prepared.networks.items():
        children = np.flatnonzero(net.parent == 0)
        if len(children):
            i_head = np.sum(currents[phase][children] / net.edge_tap[children])
            head_va += abs(v[phase][0] * np.conj(i_head))

    return PowerFlowSolution(
        converged=converged, iterations=iterations, max_mismatch_pu=mismatch,
        worst_bus=worst_key, prepared=prepared, v=v, edge_current=currents,
        transformer_kva=xfmr_kva, feeder_head_kva=head_va / 1000.0)


def solve(feeder: FeederModel, loads=None,
          tolerance: float = DEFAULT_TOLERANCE_PU,
          max_iter: int = DEFAULT_MAX_ITER,
          cap_on=None, open_lines: frozenset = frozenset(),
          prepared: PreparedFeeder | None = None) -> PowerFlowSolution:
    """Solve the feeder with additional constant-power loads.

    `loads` maps (bus_id, phase) to complex power in kW + j*kvar consumed at
    the bus, on top of the feeder's ZIP loads and capacitors.  Returns a
    solution whose nodal power mismatch is below `tolerance` (per unit on
    the feeder power base) or one flagged `converged=False` carrying the
    worst-mismatch bus.
    """
    if prepared is None or prepared.open_lines != open_lines:
        prepared = prepare(feeder, open_lines)
    extra = None
    if loads:
        extra = prepared.zero_loads()
        for (bus, phase), s_kw in loads.items():
            key = (bus, phase)
            if key in prepared.deenergized:
                continue
            if key not in prepared.node_of:
                raise PowerFlowError(f"load at unknown bus/phase {key}")
            ph, idx = prepared.node_of[key]
            extra[ph][idx] += complex(s_kw) * 1000.0
    return solve_arrays(prepared, extra, cap_on, tolerance, max_iter)
