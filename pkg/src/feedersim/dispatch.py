"""Broadcast probabilistic dispatch of air conditioners.

A proportional controller turns the aggregate power error into a switching
probability that is broadcast to the population; each available AC draws an
independent uniform and switches when the draw falls below the command
magnitude.  An AC is available only when (1) its air temperature is inside
the deadband, (2) it has not switched in the last two minutes, and (3) a
model predicts that switching it would not drive it to a deadband limit
within two minutes.  The module also carries the per-cycle switch
probability analytics that explain duty-cycle-dependent cycling bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from feedersim import _kernels
from feedersim.hvac import HouseBank, HouseParams, HouseState, HouseStateArrays, discretize

LOCKOUT_S = 120.0             # minimum time between switches of one unit
PREDICTION_HORIZON_S = 120.0  # look-ahead for the switch-safety check


@dataclass
class ControllerState:
    """Inputs of the proportional switching-probability law for one step."""

    gain: float               # proportional gain
    mean_on_power_kw: float   # steady-state average draw of an ON unit
    desired_kw: float         # aggregate power target
    measured_kw: float        # measured aggregate power
    available_count: int      # units available to switch in the needed direction

    def __post_init__(self):
        if self.mean_on_power_kw <= 0:
            raise ValueError("mean_on_power_kw must be positive")
        if self.available_count < 0:
            raise ValueError("available_count must be nonnegative")


@dataclass(frozen=True)
class DispatchCommand:
    """Signed switching probability: positive switches units ON."""

    probability: float
    time_s: float = 0.0

    def __post_init__(self):
        if abs(self.probability) > 1.0 + 1e-12:
            raise ValueError("|probability| must be <= 1")


@dataclass(frozen=True)
class AvailabilityFlags:
    in_deadband: bool
    lockout_clear: bool
    predicted_safe: bool

    @property
    def available(self) -> bool:
        return self.in_deadband and self.lockout_clear and self.predicted_safe


def control_signal(ctrl: ControllerState, now_s: float = 0.0) -> DispatchCommand:
    """Proportional switching probability, clamped to [-1, 1].

    Zero when no unit is available (no actuation possible).
    """
    if ctrl.available_count == 0:
        return DispatchCommand(0.0, now_s)
    u = ctrl.gain * (ctrl.desired_kw - ctrl.measured_kw) / (
        ctrl.mean_on_power_kw * ctrl.available_count)
    return DispatchCommand(max(-1.0, min(1.0, u)), now_s)


def availability(params: HouseParams, state: HouseState, now_s: float,
                 theta_amb: float, q_gain: float) -> AvailabilityFlags:
    """Evaluate the three availability conditions for one house."""
    in_deadband = params.deadband_low <= state.air_temp <= params.deadband_high
    lockout_clear = (now_s - state.last_switch_s) > LOCKOUT_S

    m = discretize(params, PREDICTION_HORIZON_S)
    flipped = 1 - state.on
    b = np.array([
        (-flipped * params.q_ac_kw + params.r_gain * q_gain + params.ua * theta_amb) / params.c_air,
        (1.0 - params.r_gain) * q_gain / params.c_mass,
    ])
    x = m.phi @ np.array([state.air_temp, state.mass_temp]) + m.gamma @ b
    if flipped == 1:  # switching ON cools toward the lower limit
        predicted_safe = x[0] >= params.deadband_low
    else:             # switching OFF warms toward the upper limit
        predicted_safe = x[0] <= params.deadband_high
    return AvailabilityFlags(bool(in_deadband), bool(lockout_clear),
                             bool(predicted_safe))


def availability_arrays(bank: HouseBank, states: HouseStateArrays, now_s: float,
                        theta_amb: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized availability flags for an entire population."""
    in_deadband = ((states.air_temp >= bank.deadband_low)
                   & (states.air_temp <= bank.deadband_high))
    lockout_clear = (now_s - states.last_switch_s) > LOCKOUT_S
    endpoint = bank.flip_endpoint(states, theta_amb, PREDICTION_HORIZON_S)
    predicted_safe = np.where(states.on == 0,
                              endpoint >= bank.deadband_low,
                              endpoint <= bank.deadband_high)
    return in_deadband, lockout_clear, predicted_safe


def dispatch_draws(seed: int, step_index: int, n: int) -> np.ndarray:
    """One uniform per unit from a counter-based stream keyed by (seed, unit, step).

    Deterministic and order-independent, so parallel evaluation cannot
    perturb results.
    """
    ids = np.arange(n, dtype=np.uint64)
    return _kernels.uniform_draws(int(seed), int(step_index), ids)


def apply_dispatch(on: np.ndarray, available: np.ndarray, cmd: DispatchCommand,
                   draws: np.ndarray, last_switch_s: np.ndarray) -> np.ndarray:
    """Switch available units in the command's direction when draw < |u|.

    Mutates `on` and `last_switch_s` in place; returns the switched mask.
    Units that are unavailable, or already in the commanded state, never
    switch.
    """
    u = cmd.probability
    if u == 0.0:
        return np.zeros(len(on), dtype=bool)
    target = 1 if u > 0 else 0
    candidates = available & (on != target)
    switched = candidates & (draws < abs(u))
    on[switched] = target
    last_switch_s[switched] = cmd.time_s
    return switched


def priority_stack_dispatch(on: np.ndarray, available: np.ndarray,
                            cmd: DispatchCommand, air_temp: np.ndarray,
                            deadband_low: np.ndarray, deadband_high: np.ndarray,
                            last_switch_s: np.ndarray) -> np.ndarray:
    """Deterministic alternative: switch the units closest to a natural switch.

    Candidates are ranked by distance to the deadband edge they are drifting
    toward and the top round(|u| * n_candidates) are switched.
    """
    u = cmd.probability
    if u == 0.0:
        return np.zeros(len(on), dtype=bool)
    target = 1 if u > 0 else 0
    candidates = available & (on != target)
    idx = np.flatnonzero(candidates)
    count = int(round(abs(u) * len(idx)))
    switched = np.zeros(len(on), dtype=bool)
    if count == 0 or len(idx) == 0:
        return switched
    if target == 1:  # off units drifting up: closest to the high edge first
        distance = deadband_high[idx] - air_temp[idx]
    else:
        distance = air_temp[idx] - deadband_low[idx]
    chosen = idx[np.argsort(distance, kind="stable")[:count]]
    on[chosen] = target
    last_switch_s[chosen] = cmd.time_s
    switched[chosen] = True
    return switched


@dataclass(frozen=True)
class DutyCycleStats:
    """Inputs of the per-natural-cycle dispatch-switch probability formulas."""

    duty: float               # natural duty cycle of the unit in question
    period_steps: float       # time steps in one natural cycle
    pop_duty: float           # population-average duty cycle
    pop_size: float           # number of units in the population
    switched_per_step: float  # units switched by dispatch each step

    def __post_init__(self):
        if not 0.0 < self.duty < 1.0:
            raise ValueError("duty must be in (0, 1)")
        if not 0.0 < self.pop_duty < 1.0:
            raise ValueError("pop_duty must be in (0, 1)")
        if self.period_steps <= 0 or self.pop_size <= 0:
            raise ValueError("period_steps and pop_size must be positive")
        if self.switched_per_step < 0:
            raise ValueError("switched_per_step must be nonnegative")

    @property
    def on_steps(self) -> float:
        return self.duty * self.period_steps

    @property
    def off_steps(self) -> float:
        return (1.0 - self.duty) * self.period_steps


def switch_probability_from_trace(u_trace) -> float:
    """Probability of at least one dispatch switch over a command trace.

    Exact complement-product form: 1 - prod_k (1 - u_k), with commands
    clipped to [0, 1].
    """
    u = np.clip(np.asarray(u_trace, dtype=float), 0.0, 1.0)
    return float(1.0 - np.prod(1.0 - u))


def _per_step_commands(stats: DutyCycleStats) -> tuple[float, float]:
    u_off = stats.switched_per_step / (stats.pop_duty * stats.pop_size)
    u_on = stats.switched_per_step / ((1.0 - stats.pop_duty) * stats.pop_size)
    if u_off >= 1.0 or u_on >= 1.0:
        raise ValueError(
            "switched_per_step too large for the population split: the "
            "per-step command would reach 1")
    return u_off, u_on


def switching_probabilities(stats: DutyCycleStats) -> tuple[float, float]:
    """(P_switch_off, P_switch_on) over one natural cycle.

    Approximates the per-step commands as constants set by the population
    split and compounds them over the on and off portions of the cycle.
    """
    u_off, u_on = _per_step_commands(stats)
    p_off = 1.0 - (1.0 - u_off) ** stats.on_steps
    p_on = 1.0 - (1.0 - u_on) ** stats.off_steps
    return p_off, p_on


def bias_threshold(stats: DutyCycleStats) -> bool:
    """True when the unit is more likely to be dispatch-switched ON than OFF.

    Closed-form comparison equivalent to P_switch_on > P_switch_off; at a
    population duty of 0.5 it reduces to duty < 0.5.
    """
    if stats.switched_per_step == 0:
        return False
    u_off, u_on = _per_step_commands(stats)
    rhs = math.log1p(-u_on) / math.log1p(-u_off)
    return stats.duty / (1.0 - stats.duty) < rhs
