"""Network-constraint monitoring with duration-aware violation logs.

Continuous voltage limits only count as violated after a sustained
excursion of more than two minutes; emergency voltage, unbalance, thermal,
and current limits are instantaneous.  Contiguous over-limit steps merge
into a single record carrying the excursion's start, end, and worst value.
Dwell timers reset on re-entry into the band (no intermittent
accumulation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ConstraintLimits:
    """Operating limits; defaults follow common distribution practice."""

    voltage_continuous_low: float = 0.95    # p.u.
    voltage_continuous_high: float = 1.05   # p.u.
    voltage_continuous_dwell_s: float = 120.0
    voltage_emergency_low: float = 0.90     # p.u.
    voltage_emergency_high: float = 1.083   # p.u.
    unbalance_max: float = 0.03
    transformer_power_max_pu: float = 2.0   # of rating
    transformer_aging_avg_max: float = 1.0  # hour-average rate
    line_current_max_pu: float = 1.0        # of ampacity

    def __post_init__(self):
        if not (self.voltage_emergency_low < self.voltage_continuous_low
                < self.voltage_continuous_high < self.voltage_emergency_high):
            raise ValueError("emergency band must strictly contain the "
                             "continuous band")


@dataclass(frozen=True)
class ViolationRecord:
    component_id: str
    kind: str
    start_s: float
    end_s: float
    worst: float

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


@dataclass
class ViolationLog:
    records: list[ViolationRecord] = field(default_factory=list)

    def add(self, record: ViolationRecord) -> None:
        self.records.append(record)

    def count(self, kind_prefix: str = "") -> int:
        return sum(1 for r in self.records if r.kind.startswith(kind_prefix))

    def components(self, kind_prefix: str = "") -> set[str]:
        return {r.component_id for r in self.records
                if r.kind.startswith(kind_prefix)}

    def __len__(self) -> int:
        return len(self.records)


def unbalance_fraction(magnitudes) -> float:
    """Max deviation of the phase magnitudes from their mean, over the mean."""
    m = np.asarray(magnitudes, dtype=float)
    mean = m.mean()
    if mean == 0:
        return 0.0
    return float(np.max(np.abs(m - mean)) / mean)


class _ExcursionTracker:
    """Merges per-step over-limit observations into duration-aware records.

    An excursion starts at the beginning of the first over-limit step and
    ends with its last over-limit step; it is logged only when its duration
    strictly exceeds `dwell_s` (zero for instantaneous constraints).
    """

    def __init__(self, keys: list[str], kind: str, dwell_s: float,
                 log: ViolationLog, high_side: bool = True):
        self.keys = keys
        self.kind = kind
        self.dwell_s = dwell_s
        self.log = log
        self.high_side = high_side
        n = len(keys)
        self.start = np.full(n, np.nan)
        self.last_out = np.full(n, np.nan)
        self.worst = np.zeros(n)

    def observe(self, outside: np.ndarray, values: np.ndarray, now_s: float,
                dt_s: float) -> None:
        outside = np.asarray(outside, dtype=bool)
        ended = ~outside & ~np.isnan(self.start)
        for i in np.flatnonzero(ended):
            self._close(i)
        fresh = outside & np.isnan(self.start)
        self.start[fresh] = now_s - dt_s
        self.worst[fresh] = values[fresh]
        ongoing = outside & ~fresh
        if self.high_side:
            self.worst[ongoing] = np.maximum(self.worst[ongoing], values[ongoing])
        else:
            self.worst[ongoing] = np.minimum(self.worst[ongoing], values[ongoing])
        self.last_out[outside] = now_s

    def finish(self) -> None:
        for i in np.flatnonzero(~np.isnan(self.start)):
            self._close(i)

    def _close(self, i: int) -> None:
        duration = self.last_out[i] - self.start[i]
        if duration > self.dwell_s:
            self.log.add(ViolationRecord(
                component_id=self.keys[i], kind=self.kind,
                start_s=float(self.start[i]), end_s=float(self.last_out[i]),
                worst=float(self.worst[i])))
        self.start[i] = np.nan


class ConstraintMonitor:
    """Per-step constraint evaluation for one simulation window.

    Channel lists fix the alignment of the observation arrays: service-node
    voltages as (bus, phase) pairs, unbalance per three-phase bus, loading
    per transformer, current per (line, phase).  NaN observations (e.g.
    de-energized nodes) are skipped.
    """

    def __init__(self, limits: ConstraintLimits,
                 service_keys: list[tuple[str, str]],
                 three_phase_buses: list[str],
                 transformer_ids: list[str],
                 line_keys: list[tuple[str, str]]):
        self.limits = limits
        self.log = ViolationLog()
        vkeys = [f"{bus}:{phase}" for bus, phase in service_keys]
        lkeys = [f"{line}:{phase}" for line, phase in line_keys]
        lim = limits
        self._trackers = {
            "cont_hi": _ExcursionTracker(vkeys, "voltage_continuous_high",
                                         lim.voltage_continuous_dwell_s, self.log),
            "cont_lo": _ExcursionTracker(vkeys, "voltage_continuous_low",
                                         lim.voltage_continuous_dwell_s, self.log,
                                         high_side=False),
            "emerg_hi": _ExcursionTracker(vkeys, "voltage_emergency_high",
                                          0.0, self.log),
            "emerg_lo": _ExcursionTracker(vkeys, "voltage_emergency_low",
                                          0.0, self.log, high_side=False),
            "unbalance": _ExcursionTracker(three_phase_buses, "unbalance",
                                           0.0, self.log),
            "xfmr_power": _ExcursionTracker(transformer_ids, "transformer_power",
                                            0.0, self.log),
            "line_current": _ExcursionTracker(lkeys, "line_current",
                                              0.0, self.log),
        }

    def check_voltages(self, vmag_pu: np.ndarray, now_s: float, dt_s: float) -> None:
        lim = self.limits
        valid = ~np.isnan(vmag_pu)
        v = np.where(valid, vmag_pu, 1.0)
        self._trackers["cont_hi"].observe(valid & (v > lim.voltage_continuous_high),
                                          v, now_s, dt_s)
        self._trackers["cont_lo"].observe(valid & (v < lim.voltage_continuous_low),
                                          v, now_s, dt_s)
        self._trackers["emerg_hi"].observe(valid & (v > lim.voltage_emergency_high),
                                           v, now_s, dt_s)
        self._trackers["emerg_lo"].observe(valid & (v < lim.voltage_emergency_low),
                                           v, now_s, dt_s)

    def check_unbalance(self, unbalance: np.ndarray, now_s: float, dt_s: float) -> None:
        valid = ~np.isnan(unbalance)
        u = np.where(valid, unbalance, 0.0)
        self._trackers["unbalance"].observe(valid & (u > self.limits.unbalance_max),
                                            u, now_s, dt_s)

    def check_thermal(self, xfmr_load_pu: np.ndarray, line_current_pu: np.ndarray,
                      now_s: float, dt_s: float) -> None:
        self._trackers["xfmr_power"].observe(
            xfmr_load_pu > self.limits.transformer_power_max_pu,
            xfmr_load_pu, now_s, dt_s)
        valid = ~np.isnan(line_current_pu)
        c = np.where(valid, line_current_pu, 0.0)
        self._trackers["line_current"].observe(
            valid & (c > self.limits.line_current_max_pu), c, now_s, dt_s)

    def record_fuse_open(self, fuse_id: str, now_s: float, current_a: float) -> None:
        self.log.add(ViolationRecord(component_id=fuse_id, kind="fuse_open",
                                     start_s=now_s, end_s=now_s, worst=current_a))

    def check_aging(self, transformer_ids: list[str], mean_faa: np.ndarray,
                    window_start_s: float, window_end_s: float) -> None:
        """Hour-average aging-rate check, evaluated once per window."""
        for i, xid in enumerate(transformer_ids):
            if mean_faa[i] > self.limits.transformer_aging_avg_max:
                self.log.add(ViolationRecord(
                    component_id=xid, kind="transformer_aging",
                    start_s=window_start_s, end_s=window_end_s,
                    worst=float(mean_faa[i])))

    def finish(self) -> None:
        """Close any excursion still open at the end of the window."""
        for tracker in self._trackers.values():
            tracker.finish()
