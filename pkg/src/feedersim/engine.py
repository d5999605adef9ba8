"""Scenario orchestration: warm-up, base/regulation cases, and the studies.

A trial runs a 24-hour warm-up (coarse steps, then fine steps for the last
half hour) to initialize house and transformer states, snapshots the state,
and replays the test hour once without control (base case) and optionally
once with regulation dispatch.  Both cases of a trial therefore share the
house parameters and initial conditions exactly; dispatch randomness is
isolated to the regulation case through a counter-based stream keyed by
(seed, house, step), which also makes every run reproducible regardless of
thread count.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.stats

from feedersim import dispatch as dsp
from feedersim import powerflow as pf
from feedersim.errors import ConvergenceError, ScalingError, SchemaError
from feedersim.hvac import HouseBank, HouseStateArrays
from feedersim.monitor import ConstraintLimits, ConstraintMonitor, ViolationLog, \
    unbalance_fraction
from feedersim.netmodel import FeederModel, load_feeder
from feedersim import _kernels

CAP_DWELL_S = 30.0  # capacitor switching dwell to prevent chattering

# seed stream identifiers (entropy tuples fed to numpy SeedSequence)
_STREAM_HOUSE_PARAMS = 0
_STREAM_EV_SELECTION = 1
_STREAM_INIT_TEMP = 2
_STREAM_INIT_ON = 3
_STREAM_DISPATCH = 4


# ---------------------------------------------------------------------------
# input series


@dataclass
class WeatherSeries:
    """Ambient temperature series; linear interpolation, clamped ends."""

    times_s: np.ndarray
    temps_c: np.ndarray

    @classmethod
    def from_csv(cls, path) -> "WeatherSeries":
        times, temps = _read_two_column_csv(path, "time_s", "temp_c")
        return cls(times_s=times, temps_c=temps)

    def temp_at(self, t: float) -> float:
        return float(np.interp(t, self.times_s, self.temps_c))

    @property
    def span_s(self) -> tuple[float, float]:
        return float(self.times_s[0]), float(self.times_s[-1])


@dataclass
class RegulationSignal:
    """Raw regulation signal, `time_s` relative to the test-hour start."""

    times_s: np.ndarray
    values: np.ndarray

    @classmethod
    def from_csv(cls, path) -> "RegulationSignal":
        times, values = _read_two_column_csv(path, "time_s", "signal_pu")
        return cls(times_s=times, values=values)

    def resample(self, times_s: np.ndarray) -> np.ndarray:
        lo, hi = self.times_s[0], self.times_s[-1]
        if times_s[0] < lo - 1e-9 or times_s[-1] > hi + 1e-9:
            raise SchemaError("regulation signal does not cover the test hour")
        return np.interp(times_s, self.times_s, self.values)


def _read_two_column_csv(path, col_a, col_b):
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"series file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or col_a not in reader.fieldnames \
                or col_b not in reader.fieldnames:
            raise SchemaError(f"{path}: expected columns {col_a},{col_b}")
        a, b = [], []
        for row in reader:
            a.append(float(row[col_a]))
            b.append(float(row[col_b]))
    if len(a) < 2:
        raise SchemaError(f"{path}: need at least two samples")
    times = np.asarray(a)
    if np.any(np.diff(times) <= 0):
        raise SchemaError(f"{path}: {col_a} must be strictly increasing")
    return times, np.asarray(b)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ScenarioConfig:
    """One scenario: feeder, series inputs, schedule, and dispatch settings.

    Paths in a config file are resolved relative to the file's directory.
    """

    feeder: Path
    weather: Path
    regulation_signal: Path | None = None
    case: str = "base"                 # "base" or "regulation"
    test_hour_start_s: float | None = None  # None: scan for the peak hour
    dt_test_s: float = 2.0
    dt_warmup_s: float = 30.0
    warmup_coarse_hours: float = 23.5
    warmup_fine_hours: float = 0.5
    signal_peak_scale: float = 0.4     # p.u. of the baseline
    ev_mode: str = "none"              # none | charge | discharge
    ev_penetration: float = 0.20
    ev_power_kw: float = 3.3           # unity power factor
    seed: int = 0
    gain: float = 1.0                  # proportional controller gain
    dispatch_mode: str = "probabilistic"  # or "priority_stack"
    monitored_line: str | None = None  # sensitivity line; None picks the head
    power_flow_tolerance: float = 1e-8
    max_power_flow_iter: int = 50

    def __post_init__(self):
        if self.case not in ("base", "regulation"):
            raise ValueError(f"case must be base or regulation, got {self.case!r}")
        if self.ev_mode not in ("none", "charge", "discharge"):
            raise ValueError(f"unknown ev_mode {self.ev_mode!r}")
        if self.dispatch_mode not in ("probabilistic", "priority_stack"):
            raise ValueError(f"unknown dispatch_mode {self.dispatch_mode!r}")
        if self.signal_peak_scale <= 0:
            raise ValueError("signal_peak_scale must be positive")
        fine_s = self.warmup_fine_hours * 3600.0
        if abs(fine_s / self.dt_test_s - round(fine_s / self.dt_test_s)) > 1e-9:
            raise ValueError("dt_test_s must divide the fine warm-up window")

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        import json

        path = Path(path)
        if not path.exists():
            raise SchemaError(f"config file not found: {path}")
        doc = json.loads(path.read_text())
        root = path.parent
        kwargs = dict(doc)
        for key in ("feeder", "weather", "regulation_signal"):
            if kwargs.get(key) is not None:
                kwargs[key] = root / kwargs[key]
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise SchemaError(f"{path}: {exc}")

    def to_dict(self) -> dict:
        out = {}
        for key, val in self.__dict__.items():
            out[key] = str(val) if isinstance(val, Path) else val
        return out


# ---------------------------------------------------------------------------
# results


@dataclass
class CaseResult:
    """Per-step records and summaries of one simulated test hour."""

    label: str
    start_s: float
    dt_s: float
    times_s: np.ndarray
    ac_power_kw: np.ndarray
    head_kva: np.ndarray
    desired_kw: np.ndarray | None
    command_u: np.ndarray | None
    service_keys: list[tuple[str, str]]
    service_vmag: np.ndarray            # (steps, channels), NaN = de-energized
    transformer_ids: list[str]
    xfmr_mean_load_pu: np.ndarray
    xfmr_mean_faa: np.ndarray
    xfmr_minutes_aged: np.ndarray
    violations: ViolationLog
    events: list[dict]
    dispatch_commands: int
    monitored_line: dict | None         # operating points for sensitivity

    @property
    def energy_kwh(self) -> float:
        return float(self.ac_power_kw.sum() * self.dt_s / 3600.0)

    def tracking_error_rms_kw(self) -> float | None:
        if self.desired_kw is None:
            return None
        return float(np.sqrt(np.mean((self.ac_power_kw - self.desired_kw) ** 2)))


@dataclass
class TrialResult:
    """Base case plus (optionally) the paired regulation case of one trial."""

    config: dict
    seed: int
    trial_index: int
    base: CaseResult
    regulation: CaseResult | None
    baseline_kw: float | None
    house_duty: np.ndarray
    house_transformer: list[str]
    xfmr_mean_duty: np.ndarray     # NaN for transformers with no houses
    xfmr_rating_kva: np.ndarray

    @property
    def delta_faa_pct(self) -> np.ndarray | None:
        if self.regulation is None:
            return None
        base = self.base.xfmr_mean_faa
        return 100.0 * (self.regulation.xfmr_mean_faa - base) / base


@dataclass
class EvStudyResult:
    trials: dict[str, TrialResult]          # ev_plus / no_ev / ev_minus
    overlimit_pct: dict[str, dict[str, float]]
    sensitivity: dict[str, float]           # mean |dV/dP| on the monitored line


@dataclass
class RandomizationSummary:
    n_trials: int
    transformer_ids: list[str]
    increase_counts: np.ndarray      # per transformer, 0..n_trials
    observed: np.ndarray             # histogram of counts, length n_trials+1
    expected: np.ndarray             # binomial(n_trials, p_hat) * population
    p_hat: float
    delta_faa_pct: np.ndarray        # per transformer, mean across trials
    mean_duty: np.ndarray            # mean natural duty of attached ACs
    correlation: float               # Pearson(delta_faa_pct, mean_duty)
    chi_square: float
    chi_square_critical: float       # 95% for df = bins - 2
    trials: list[TrialResult] = field(default_factory=list)


# ---------------------------------------------------------------------------
# regulation-signal scaling and peak-hour search


def scale_regulation_signal(raw_values: np.ndarray, baseline_kw: float,
                            peak_scale: float = 0.4) -> np.ndarray:
    """Desired-power series from a raw signal segment.

    The raw segment is shifted to zero mean over the hour (so the hour
    energy equals the baseline's) and scaled so its largest magnitude is
    `peak_scale` of the baseline.  An identically zero raw signal cannot be
    scaled; a constant (zero after the shift) signal degrades to a flat
    series at the baseline.
    """
    if baseline_kw <= 0:
        raise ScalingError("baseline power must be positive")
    s = np.asarray(raw_values, dtype=float)
    if not np.any(s):
        raise ScalingError("regulation signal is identically zero")
    s = s - s.mean()
    peak = np.max(np.abs(s))
    if peak == 0.0:
        return np.full(len(s), float(baseline_kw))
    return baseline_kw * (1.0 + peak_scale * s / peak)


def scan_hourly_head_kva(feeder: FeederModel, weather: WeatherSeries,
                         seed: int = 0, dt_s: float = 30.0
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Hour-start offsets and hourly-mean feeder-head kVA, uncontrolled."""
    ctx = _Context.bare(feeder, weather, seed=seed)
    t0, t_end = weather.span_s
    n_hours = int((t_end - t0) // 3600.0)
    if n_hours < 1:
        raise SchemaError("weather series shorter than one hour")
    state = ctx.initial_state(trial_index=0, t0=t0)
    steps_per_hour = int(round(3600.0 / dt_s))
    hourly = np.zeros(n_hours)
    for h in range(n_hours):
        acc = 0.0
        for k in range(steps_per_hour):
            t = t0 + h * 3600.0 + k * dt_s
            sol, _ = ctx.advance_step(state, t, dt_s)
            acc += sol.feeder_head_kva
        hourly[h] = acc / steps_per_hour
    return t0 + 3600.0 * np.arange(n_hours), hourly


def find_peak_hour(feeder: FeederModel, weather: WeatherSeries,
                   seed: int = 0, dt_s: float = 30.0) -> float:
    """Start time of the hour with the highest mean feeder-head apparent
    power in an uncontrolled coarse-step scan (earliest on exact ties)."""
    starts, hourly = scan_hourly_head_kva(feeder, weather, seed, dt_s)
    return float(starts[int(np.argmax(hourly))])


# ---------------------------------------------------------------------------
# simulation context and state


@dataclass
class _SimState:
    houses: HouseStateArrays
    xfmr_oil: np.ndarray
    xfmr_wind: np.ndarray
    xfmr_aged: np.ndarray
    xfmr_faa: np.ndarray      # aging rate at the most recent step
    cap_on: np.ndarray        # bool per capacitor
    cap_dwell: np.ndarray
    fuse_closed: np.ndarray   # bool per fuse
    prepared: pf.PreparedFeeder
    measured_kw: float = 0.0
    mean_on_power_kw: float = 1.0

    def copy(self) -> "_SimState":
        return _SimState(
            houses=self.houses.copy(), xfmr_oil=self.xfmr_oil.copy(),
            xfmr_wind=self.xfmr_wind.copy(), xfmr_aged=self.xfmr_aged.copy(),
            xfmr_faa=self.xfmr_faa.copy(),
            cap_on=self.cap_on.copy(), cap_dwell=self.cap_dwell.copy(),
            fuse_closed=self.fuse_closed.copy(), prepared=self.prepared,
            measured_kw=self.measured_kw,
            mean_on_power_kw=self.mean_on_power_kw)


@dataclass(frozen=True)
class _ControlInput:
    """Controller inputs the engine hands to one step."""

    desired_kw: float
    step_index: int


class _Context:
    """Immutable per-scenario data shared by all trials and cases."""

    def __init__(self, config: ScenarioConfig):
        feeder = load_feeder(config.feeder)
        weather = WeatherSeries.from_csv(config.weather)
        self._init(feeder, weather, config)

    @classmethod
    def bare(cls, feeder: FeederModel, weather: WeatherSeries, seed: int = 0):
        """Context without a config file, for scans and the populator."""
        self = cls.__new__(cls)
        config = ScenarioConfig(feeder=Path("<memory>"), weather=Path("<memory>"),
                                seed=seed)
        self._init(feeder, weather, config)
        return self

    def _init(self, feeder: FeederModel, weather: WeatherSeries,
              config: ScenarioConfig):
        self.config = config
        self.feeder = feeder
        self.weather = weather
        self.prepared0 = pf.prepare(feeder)
        self.bank = HouseBank([h.params for h in feeder.houses],
                              [h.q_gain_kw for h in feeder.houses])
        self.bank.matrices(config.dt_test_s)
        self.bank.matrices(config.dt_warmup_s)
        self.bank.matrices(dsp.PREDICTION_HORIZON_S)
        self.house_transformer = [h.transformer for h in feeder.houses]

        # per-phase scatter indices for house and EV loads
        self.house_scatter = {}
        for phase, net in self.prepared0.networks.items():
            pos = [i for i, h in enumerate(feeder.houses) if h.phase == phase]
            nodes = [net.index[feeder.houses[i].bus] for i in pos]
            self.house_scatter[phase] = (np.array(pos, dtype=np.intp),
                                         np.array(nodes, dtype=np.intp))

        n_houses = len(feeder.houses)
        n_ev = int(round(config.ev_penetration * n_houses))
        rng = np.random.default_rng(
            np.random.SeedSequence((config.seed, _STREAM_EV_SELECTION)))
        self.ev_houses = np.sort(rng.choice(n_houses, size=n_ev, replace=False)) \
            if n_ev else np.array([], dtype=int)

        xf = feeder.transformers
        self.xfmr_ids = [t.id for t in xf]
        self.xfmr_rating = np.array([t.rating_kva for t in xf])
        thermal = [t.thermal_params() for t in xf]
        self.xfmr_tau_w = np.array([p.winding_tau_s for p in thermal])
        self.xfmr_wind_rise_r = np.array([p.rated_winding_rise_c for p in thermal])
        self.xfmr_oil_rise_r = np.array([p.rated_oil_rise_c for p in thermal])
        self.xfmr_loss_ratio = np.array([p.loss_ratio for p in thermal])
        self.xfmr_tau_oil_r = np.array([p.oil_tau_rated_s for p in thermal])

        # line monitoring channels; fuses by line id
        fuse_by_line = {}
        for i, fu in enumerate(feeder.fuses):
            fuse_by_line[fu.line] = (i, fu)
        self.line_keys = sorted(self.prepared0.line_edges)
        self.line_ampacity = np.array(
            [feeder.line(lid).ampacity_a for lid, _ in self.line_keys])
        self.line_fuse_idx = np.array(
            [fuse_by_line[lid][0] if lid in fuse_by_line else -1
             for lid, _ in self.line_keys], dtype=int)
        self.line_fuse_limit = np.array(
            [fuse_by_line[lid][1].current_limit_a if lid in fuse_by_line else np.inf
             for lid, _ in self.line_keys])

        self.service_keys = self.prepared0.service_keys
        self.three_phase_buses = self.prepared0.three_phase_buses
        self.dispatch_seed = int(np.random.SeedSequence(
            (config.seed, _STREAM_DISPATCH)).generate_state(1, dtype=np.uint64)[0])

        self._duty_cache: dict[float, np.ndarray] = {}
        self._test_start: float | None = None
        self.limits = ConstraintLimits()

    def duties_at(self, theta_amb: float) -> np.ndarray:
        key = round(float(theta_amb), 6)
        if key not in self._duty_cache:
            self._duty_cache[key] = \
                self.bank.natural_duty_cycles(key, strict=False) \
                if self.bank.n else np.array([])
        return self._duty_cache[key]

    def test_hour_start(self) -> float:
        """Configured test-hour start, or the scanned peak hour (cached)."""
        if self.config.test_hour_start_s is not None:
            return float(self.config.test_hour_start_s)
        if self._test_start is None:
            self._test_start = find_peak_hour(self.feeder, self.weather,
                                              seed=self.config.seed)
        return self._test_start

    def prime(self) -> None:
        """Precompute everything trials share, so threads never race caches."""
        test_start = self.test_hour_start()
        t0 = test_start - (self.config.warmup_coarse_hours
                           + self.config.warmup_fine_hours) * 3600.0
        self.duties_at(self.weather.temp_at(t0))
        self.duties_at(self._hour_mean_ambient(test_start))

    def _hour_mean_ambient(self, test_start: float) -> float:
        return float(np.mean([self.weather.temp_at(test_start + x)
                              for x in (0.0, 1800.0, 3600.0)]))

    def monitored_line_id(self) -> tuple[str, str]:
        """(line id, phase) whose downstream operating point is recorded."""
        if self.config.monitored_line is not None:
            lid = self.config.monitored_line
            for (l, phase) in sorted(self.prepared0.line_edges):
                if l == lid:
                    return lid, phase
            raise SchemaError(f"monitored line {lid!r} not found")
        head = [l for l in self.feeder.lines
                if l.from_bus == self.feeder.slack_bus_id]
        if not head:
            raise SchemaError("feeder has no line at the slack bus to monitor")
        line = head[0]
        return line.id, sorted(line.impedance_ohm)[0]

    # -- state construction and stepping ---------------------------------

    def initial_state(self, trial_index: int, t0: float) -> _SimState:
        n = self.bank.n
        cfg = self.config
        amb0 = self.weather.temp_at(t0)
        duties = self.duties_at(amb0)
        rng_theta = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, _STREAM_INIT_TEMP)))
        rng_on = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, _STREAM_INIT_ON, trial_index)))
        air = rng_theta.uniform(self.bank.deadband_low, self.bank.deadband_high) \
            if n else np.array([])
        on = (rng_on.random(n) < duties).astype(np.int8) if n else \
            np.array([], dtype=np.int8)
        houses = HouseStateArrays(
            air_temp=air,
            mass_temp=air + (1.0 - self.bank.r_gain) * self.bank.q_gain_kw / self.bank.hm
            if n else np.array([]),
            on=on,
            last_switch_s=np.full(n, t0 - 1e9),
            duty_cycle=duties.copy())
        m = len(self.feeder.transformers)
        state = _SimState(
            houses=houses,
            xfmr_oil=np.zeros(m), xfmr_wind=np.zeros(m), xfmr_aged=np.zeros(m),
            xfmr_faa=np.zeros(m),
            cap_on=np.array([c.on for c in self.feeder.capacitors], dtype=bool),
            cap_dwell=np.zeros(len(self.feeder.capacitors)),
            fuse_closed=np.array([fu.closed for fu in self.feeder.fuses],
                                 dtype=bool),
            prepared=self._prepared_for(
                np.array([fu.closed for fu in self.feeder.fuses], dtype=bool)))
        state.measured_kw = self.bank.aggregate_power_kw(houses)
        return state

    def _prepared_for(self, fuse_closed: np.ndarray) -> pf.PreparedFeeder:
        open_lines = frozenset(
            fu.line for fu, closed in zip(self.feeder.fuses, fuse_closed)
            if not closed)
        if not open_lines:
            return self.prepared0
        return pf.prepare(self.feeder, open_lines)

    def house_loads_va(self, houses: HouseStateArrays,
                       ev_mode: str) -> dict[str, np.ndarray]:
        s_house = (self.bank.power_kw + 1j * self.bank.reactive_kvar) \
            * houses.on * 1000.0
        if ev_mode != "none" and len(self.ev_houses):
            sign = 1.0 if ev_mode == "charge" else -1.0
            ev = np.zeros(self.bank.n, dtype=np.complex128)
            ev[self.ev_houses] = sign * self.config.ev_power_kw * 1000.0
            s_house = s_house + ev
        out = {}
        for phase, net in self.prepared0.networks.items():
            arr = np.zeros(len(net.parent), dtype=np.complex128)
            pos, nodes = self.house_scatter[phase]
            if len(pos):
                np.add.at(arr, nodes, s_house[pos])
            out[phase] = arr
        return out

    def advance_step(self, state: _SimState, t_start: float, dt_s: float,
                     control: _ControlInput | None = None,
                     ev_mode: str = "none",
                     monitor: ConstraintMonitor | None = None,
                     events: list | None = None
                     ) -> tuple[pf.PowerFlowSolution, dsp.DispatchCommand | None]:
        """One quasi-steady step: houses advance, dispatch applies, the
        network solves, transformer thermals update.

        With `control` given, the switching probability is computed from the
        previous step's measurement after the natural thermostat switching,
        using the availability of the needed direction.  Capacitor and fuse
        decisions take effect on the following step.
        """
        cfg = self.config
        t_end = t_start + dt_s
        theta_amb = self.weather.temp_at(t_start)
        if self.bank.n:
            self.bank.step(state.houses, theta_amb, dt_s, t_start)

        command = None
        if control is not None and self.bank.n:
            error = control.desired_kw - state.measured_kw
            in_db, lockout, safe = dsp.availability_arrays(
                self.bank, state.houses, t_end, theta_amb)
            available = in_db & lockout & safe
            pool = available & (state.houses.on == (0 if error > 0 else 1))
            ctrl = dsp.ControllerState(
                gain=cfg.gain, mean_on_power_kw=state.mean_on_power_kw,
                desired_kw=control.desired_kw, measured_kw=state.measured_kw,
                available_count=int(pool.sum()))
            command = dsp.control_signal(ctrl, now_s=t_end)
            if command.probability != 0.0:
                if cfg.dispatch_mode == "probabilistic":
                    draws = dsp.dispatch_draws(self.dispatch_seed,
                                               control.step_index, self.bank.n)
                    dsp.apply_dispatch(state.houses.on, available, command,
                                       draws, state.houses.last_switch_s)
                else:
                    dsp.priority_stack_dispatch(
                        state.houses.on, available, command,
                        state.houses.air_temp, self.bank.deadband_low,
                        self.bank.deadband_high, state.houses.last_switch_s)

        extra = self.house_loads_va(state.houses, ev_mode)
        if state.prepared is not self.prepared0:
            extra = _remap_loads(extra, self.prepared0, state.prepared)
        sol = pf.solve_arrays(state.prepared, extra, state.cap_on,
                              cfg.power_flow_tolerance, cfg.max_power_flow_iter)
        if not sol.converged:
            raise ConvergenceError(
                f"power flow diverged at t={t_start:.0f}s "
                f"(mismatch {sol.max_mismatch_pu:.3e} at bus {sol.worst_bus})",
                worst_bus=sol.worst_bus, mismatch_pu=sol.max_mismatch_pu)

        state.measured_kw = self.bank.aggregate_power_kw(state.houses) \
            if self.bank.n else 0.0

        load_pu = sol.transformer_kva / self.xfmr_rating
        state.xfmr_faa = _kernels.xfmr_step(
            state.xfmr_oil, state.xfmr_wind, state.xfmr_aged, load_pu,
            theta_amb, dt_s, self.xfmr_tau_w, self.xfmr_wind_rise_r,
            self.xfmr_oil_rise_r, self.xfmr_loss_ratio, self.xfmr_tau_oil_r)

        self._update_caps(state, sol, dt_s, t_end, events)
        self._update_fuses(state, sol, t_end, monitor, events)
        return sol, command

    def _update_caps(self, state, sol, dt_s, t_end, events):
        for i, cap in enumerate(self.feeder.capacitors):
            ctl = cap.control
            if ctl.mode != "voltage":
                continue
            key = (ctl.sense_bus, ctl.sense_phase)
            if key in state.prepared.deenergized or key not in state.prepared.node_of:
                continue
            v = abs(sol.voltage_pu(ctl.sense_bus, ctl.sense_phase))
            wants_off = state.cap_on[i] and v > ctl.v_off
            wants_on = (not state.cap_on[i]) and v < ctl.v_on
            if wants_off or wants_on:
                state.cap_dwell[i] += dt_s
                if state.cap_dwell[i] >= CAP_DWELL_S:
                    state.cap_on[i] = not state.cap_on[i]
                    state.cap_dwell[i] = 0.0
                    if events is not None:
                        events.append({"time_s": t_end, "kind": "capacitor",
                                       "component": cap.id,
                                       "detail": "on" if state.cap_on[i] else "off"})
            else:
                state.cap_dwell[i] = 0.0

    def _update_fuses(self, state, sol, t_end, monitor, events):
        if not len(state.fuse_closed):
            return
        tripped = False
        for k, (lid, phase) in enumerate(self.line_keys):
            fi = self.line_fuse_idx[k]
            if fi < 0 or not state.fuse_closed[fi]:
                continue
            current = abs(sol.line_current_a(lid, phase))
            if current > self.line_fuse_limit[k]:
                state.fuse_closed[fi] = False
                tripped = True
                if monitor is not None:
                    monitor.record_fuse_open(self.feeder.fuses[fi].id, t_end,
                                             current)
                if events is not None:
                    events.append({"time_s": t_end, "kind": "fuse",
                                   "component": self.feeder.fuses[fi].id,
                                   "detail": "open"})
        if tripped:
            state.prepared = self._prepared_for(state.fuse_closed)

    # -- monitoring gathers (canonical channel alignment) -----------------

    def service_vmag(self, sol: pf.PowerFlowSolution) -> np.ndarray:
        if sol.prepared is self.prepared0:
            return sol.service_voltages_pu()
        out = np.full(len(self.service_keys), np.nan)
        for k, (bus, phase) in enumerate(self.service_keys):
            if (bus, phase) not in sol.prepared.deenergized:
                out[k] = abs(sol.voltage_pu(bus, phase))
        return out

    def unbalance_values(self, sol: pf.PowerFlowSolution) -> np.ndarray:
        pr = sol.prepared
        buses = self.three_phase_buses
        if not buses:
            return np.array([])
        if pr is self.prepared0:
            mags = np.stack([
                np.abs(sol.v[p][pr.three_phase_idx[p]])
                / pr.networks[p].v_nom[pr.three_phase_idx[p]]
                for p in ("A", "B", "C")], axis=1)
        else:
            mags = np.full((len(buses), 3), np.nan)
            for i, bus in enumerate(buses):
                for j, p in enumerate(("A", "B", "C")):
                    if (bus, p) not in pr.deenergized:
                        mags[i, j] = abs(sol.voltage_pu(bus, p))
        mean = mags.mean(axis=1)
        with np.errstate(invalid="ignore"):
            out = np.max(np.abs(mags - mean[:, None]), axis=1) / mean
        return out

    def line_current_ratio(self, sol: pf.PowerFlowSolution) -> np.ndarray:
        out = np.full(len(self.line_keys), np.nan)
        for k, (lid, phase) in enumerate(self.line_keys):
            cur = sol.line_current_a(lid, phase)
            out[k] = abs(cur) / self.line_ampacity[k]
        return out


def _remap_loads(extra, prepared0, prepared):
    """Re-index per-phase load arrays after a topology change."""
    out = {}
    for phase, net in prepared.networks.items():
        arr = np.zeros(len(net.parent), dtype=np.complex128)
        net0 = prepared0.networks[phase]
        for bus, idx in net.index.items():
            arr[idx] = extra[phase][net0.index[bus]]
        out[phase] = arr
    return out


# ---------------------------------------------------------------------------
# trial execution


def _run_warmup(ctx: _Context, state: _SimState, test_start_s: float) -> None:
    cfg = ctx.config
    t0 = test_start_s - (cfg.warmup_coarse_hours + cfg.warmup_fine_hours) * 3600.0
    lo, hi = ctx.weather.span_s
    if t0 < lo - 1e-9 or test_start_s + 3600.0 > hi + 1e-9:
        raise SchemaError(
            f"weather series [{lo:.0f}, {hi:.0f}]s does not cover warm-up plus "
            f"test hour [{t0:.0f}, {test_start_s + 3600.0:.0f}]s")
    coarse_end = t0 + cfg.warmup_coarse_hours * 3600.0
    n_coarse = int(round((coarse_end - t0) / cfg.dt_warmup_s))
    n_fine = int(round((test_start_s - coarse_end) / cfg.dt_test_s))

    on_power_acc = 0.0
    on_power_n = 0
    est_window = test_start_s - 3600.0
    for k in range(n_coarse):
        t = t0 + k * cfg.dt_warmup_s
        ctx.advance_step(state, t, cfg.dt_warmup_s)
        if t + cfg.dt_warmup_s > est_window:
            n_on = int(state.houses.on.sum()) if ctx.bank.n else 0
            if n_on:
                on_power_acc += float(ctx.bank.power_kw @ state.houses.on) / n_on
                on_power_n += 1
    for k in range(n_fine):
        t = coarse_end + k * cfg.dt_test_s
        ctx.advance_step(state, t, cfg.dt_test_s)
        n_on = int(state.houses.on.sum()) if ctx.bank.n else 0
        if n_on:
            on_power_acc += float(ctx.bank.power_kw @ state.houses.on) / n_on
            on_power_n += 1
    # mean on-unit draw over the final warm-up hour anchors the controller

    if on_power_n:
        state.mean_on_power_kw = on_power_acc / on_power_n
    elif ctx.bank.n:
        state.mean_on_power_kw = float(ctx.bank.power_kw.mean())


def _run_hour(ctx: _Context, state: _SimState, label: str, start_s: float,
              desired_kw: np.ndarray | None, ev_mode: str) -> CaseResult:
    cfg = ctx.config
    dt = cfg.dt_test_s
    n_steps = int(round(3600.0 / dt))
    n_houses = ctx.bank.n

    monitor = ConstraintMonitor(ctx.limits, ctx.service_keys,
                                ctx.three_phase_buses, ctx.xfmr_ids,
                                ctx.line_keys)
    events: list[dict] = []
    times = start_s + dt * (1.0 + np.arange(n_steps))
    ac_power = np.zeros(n_steps)
    head_kva = np.zeros(n_steps)
    command_u = np.zeros(n_steps) if desired_kw is not None else None
    vmag = np.zeros((n_steps, len(ctx.service_keys)))
    faa_acc = np.zeros(len(ctx.xfmr_ids))
    load_acc = np.zeros(len(ctx.xfmr_ids))
    state.xfmr_aged[:] = 0.0
    dispatch_count = 0

    mon_line, mon_phase = ctx.monitored_line_id()
    line = ctx.feeder.line(mon_line)
    s_base_va = ctx.feeder.power_base_kva * 1000.0
    z_base = ctx.feeder.nominal_voltage ** 2 / s_base_va
    mon = {"line": mon_line, "phase": mon_phase,
           "r_pu": line.impedance_ohm[mon_phase].real / z_base,
           "x_pu": line.impedance_ohm[mon_phase].imag / z_base,
           "v_sending": np.zeros(n_steps), "p_pu": np.zeros(n_steps),
           "q_pu": np.zeros(n_steps)}

    for k in range(n_steps):
        t = start_s + k * dt
        control = None
        if desired_kw is not None and n_houses:
            control = _ControlInput(desired_kw=float(desired_kw[k]),
                                    step_index=k + 1)
        sol, command = ctx.advance_step(state, t, dt, control=control,
                                        ev_mode=ev_mode, monitor=monitor,
                                        events=events)
        if command is not None:
            command_u[k] = command.probability
            if command.probability != 0.0:
                dispatch_count += 1

        ac_power[k] = state.measured_kw
        head_kva[k] = sol.feeder_head_kva
        v = ctx.service_vmag(sol)
        vmag[k] = v
        load_pu = sol.transformer_kva / ctx.xfmr_rating
        faa_acc += state.xfmr_faa
        load_acc += load_pu

        monitor.check_voltages(v, t + dt, dt)
        monitor.check_unbalance(ctx.unbalance_values(sol), t + dt, dt)
        monitor.check_thermal(load_pu, ctx.line_current_ratio(sol), t + dt, dt)

        if (mon_line, mon_phase) in sol.prepared.line_edges:
            ph, child = sol.prepared.line_edges[(mon_line, mon_phase)]
            net = sol.prepared.networks[ph]
            s_recv = sol.v[ph][child] * np.conj(sol.edge_current[ph][child])
            mon["v_sending"][k] = abs(sol.v[ph][net.parent[child]]) \
                / net.v_nom[net.parent[child]]
            mon["p_pu"][k] = s_recv.real / s_base_va
            mon["q_pu"][k] = s_recv.imag / s_base_va

    monitor.finish()
    mean_faa = faa_acc / n_steps
    monitor.check_aging(ctx.xfmr_ids, mean_faa, start_s, start_s + 3600.0)

    return CaseResult(
        label=label, start_s=start_s, dt_s=dt, times_s=times,
        ac_power_kw=ac_power, head_kva=head_kva,
        desired_kw=None if desired_kw is None else np.asarray(desired_kw),
        command_u=command_u, service_keys=list(ctx.service_keys),
        service_vmag=vmag, transformer_ids=list(ctx.xfmr_ids),
        xfmr_mean_load_pu=load_acc / n_steps, xfmr_mean_faa=mean_faa,
        xfmr_minutes_aged=state.xfmr_aged.copy(), violations=monitor.log,
        events=events, dispatch_commands=dispatch_count, monitored_line=mon)


def _transformer_mean_duty(ctx: _Context, duties: np.ndarray) -> np.ndarray:
    out = np.full(len(ctx.xfmr_ids), np.nan)
    by_xfmr: dict[str, list[int]] = {}
    for i, xid in enumerate(ctx.house_transformer):
        by_xfmr.setdefault(xid, []).append(i)
    for j, xid in enumerate(ctx.xfmr_ids):
        if xid in by_xfmr:
            out[j] = float(duties[by_xfmr[xid]].mean())
    return out


def _run_trial(ctx: _Context, trial_index: int,
               ev_mode: str | None = None) -> TrialResult:
    cfg = ctx.config
    mode = cfg.ev_mode if ev_mode is None else ev_mode
    test_start = ctx.test_hour_start()
    t0 = test_start - (cfg.warmup_coarse_hours + cfg.warmup_fine_hours) * 3600.0

    state = ctx.initial_state(trial_index, t0)
    _run_warmup(ctx, state, test_start)

    base = _run_hour(ctx, state.copy(), "base", test_start, None, mode)
    regulation = None
    baseline = None
    if cfg.case == "regulation":
        if cfg.regulation_signal is None:
            raise SchemaError("regulation case requires a regulation_signal")
        raw = RegulationSignal.from_csv(cfg.regulation_signal)
        step_times = cfg.dt_test_s * (1.0 + np.arange(int(round(3600.0 / cfg.dt_test_s))))
        baseline = float(base.ac_power_kw.mean())
        desired = scale_regulation_signal(raw.resample(step_times), baseline,
                                          cfg.signal_peak_scale)
        regulation = _run_hour(ctx, state.copy(), "regulation", test_start,
                               desired, mode)

    duties = ctx.duties_at(ctx._hour_mean_ambient(test_start))
    config_dict = cfg.to_dict()
    config_dict["ev_mode"] = mode
    return TrialResult(
        config=config_dict, seed=cfg.seed, trial_index=trial_index,
        base=base, regulation=regulation, baseline_kw=baseline,
        house_duty=duties, house_transformer=list(ctx.house_transformer),
        xfmr_mean_duty=_transformer_mean_duty(ctx, duties),
        xfmr_rating_kva=ctx.xfmr_rating.copy())


def run_case(config: ScenarioConfig) -> TrialResult:
    """Run one scenario: the base case, plus the paired regulation case when
    `config.case == "regulation"` (the base case supplies its baseline)."""
    return _run_trial(_Context(config), trial_index=0)


def _overlimit_percentages(case: CaseResult, limit_pu: float,
                           dwell_s: float) -> tuple[float, float]:
    """% of service channels over `limit_pu` for any step / for > dwell."""
    v = case.service_vmag
    if v.size == 0:
        return 0.0, 0.0
    over = np.nan_to_num(v, nan=-np.inf) > limit_pu
    any_pct = 100.0 * float(over.any(axis=0).mean())
    steps_needed = int(dwell_s / case.dt_s)
    sustained = np.zeros(over.shape[1], dtype=bool)
    for j in range(over.shape[1]):
        run = 0
        for flag in over[:, j]:
            run = run + 1 if flag else 0
            if run > steps_needed:
                sustained[j] = True
                break
    return any_pct, 100.0 * float(sustained.mean())


def mean_sensitivity_magnitude(case: CaseResult,
                               power_factor: float = 0.97) -> float:
    """Mean |dV/dP_regulation| of the monitored line over the test hour."""
    mon = case.monitored_line
    total = 0.0
    n = 0
    for k in range(len(mon["v_sending"])):
        if mon["v_sending"][k] == 0.0:  # de-energized step
            continue
        terms = pf.voltage_sensitivity(
            pf.DistFlowLine(v_sending=mon["v_sending"][k], r_pu=mon["r_pu"],
                            x_pu=mon["x_pu"], p_pu=mon["p_pu"][k],
                            q_pu=mon["q_pu"][k]), power_factor)
        total += abs(terms.total)
        n += 1
    return total / n if n else math.nan


def run_ev_study(config: ScenarioConfig, threads: int | None = None) -> EvStudyResult:
    """Three paired trials differing only in EV behavior during the hour."""
    ctx = _Context(config)
    ctx.prime()
    modes = [("ev_plus", "charge"), ("no_ev", "none"), ("ev_minus", "discharge")]
    with ThreadPoolExecutor(max_workers=threads or len(modes)) as pool:
        futures = {name: pool.submit(_run_trial, ctx, 0, mode)
                   for name, mode in modes}
        trials = {name: fut.result() for name, fut in futures.items()}

    lim = ctx.limits.voltage_continuous_high
    dwell = ctx.limits.voltage_continuous_dwell_s
    table = {}
    sens = {}
    for name, trial in trials.items():
        row = {}
        row["base_any"], row["base_sustained"] = _overlimit_percentages(
            trial.base, lim, dwell)
        if trial.regulation is not None:
            row["regulation_any"], row["regulation_sustained"] = \
                _overlimit_percentages(trial.regulation, lim, dwell)
        table[name] = row
        sens[name] = mean_sensitivity_magnitude(trial.base)
    return EvStudyResult(trials=trials, overlimit_pct=table, sensitivity=sens)


def run_randomization_study(config: ScenarioConfig, n_trials: int = 6,
                            threads: int | None = None) -> RandomizationSummary:
    """Repeat base+regulation pairs varying only the initial on/off draw and
    the dispatch stream; summarize which transformers age faster."""
    if n_trials < 2:
        raise ValueError("n_trials must be at least 2")
    cfg = replace(config, case="regulation")
    ctx = _Context(cfg)
    ctx.prime()
    with ThreadPoolExecutor(max_workers=threads or min(n_trials, 6)) as pool:
        trials = list(pool.map(lambda t: _run_trial(ctx, t), range(n_trials)))

    n_x = len(ctx.xfmr_ids)
    counts = np.zeros(n_x, dtype=int)
    delta_sum = np.zeros(n_x)
    for trial in trials:
        base = trial.base.xfmr_mean_faa
        reg = trial.regulation.xfmr_mean_faa
        counts += (reg > base * (1.0 + 1e-12)).astype(int)
        delta_sum += 100.0 * (reg - base) / base
    p_hat = float(counts.sum()) / (n_x * n_trials)
    observed = np.bincount(counts, minlength=n_trials + 1).astype(float)
    expected = scipy.stats.binom.pmf(np.arange(n_trials + 1), n_trials,
                                     p_hat) * n_x
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = (observed - expected) ** 2 / expected
    chi_square = float(np.nansum(np.where(expected > 0, terms, 0.0)))
    df = max(1, (n_trials + 1) - 2)  # bins minus 1, minus the estimated p_hat
    critical = float(scipy.stats.chi2.ppf(0.95, df))

    delta_mean = delta_sum / n_trials
    duty = trials[0].xfmr_mean_duty
    valid = ~np.isnan(duty)
    correlation = float(np.corrcoef(delta_mean[valid], duty[valid])[0, 1]) \
        if valid.sum() >= 2 else math.nan
    return RandomizationSummary(
        n_trials=n_trials, transformer_ids=list(ctx.xfmr_ids),
        increase_counts=counts, observed=observed, expected=expected,
        p_hat=p_hat, delta_faa_pct=delta_mean, mean_duty=duty,
        correlation=correlation, chi_square=chi_square,
        chi_square_critical=critical, trials=trials)
