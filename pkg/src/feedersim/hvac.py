"""Two-temperature (air/mass) house thermal model with a hysteretic thermostat.

Units: temperatures degC, thermal capacities kJ/degC, heat-transfer
coefficients kW/degC, thermal and electrical powers kW, times seconds.
With the AC state held constant across a step the dynamics are linear, so
each step is taken with the exact discretization (matrix exponential)
instead of an approximate integrator; this is unconditionally stable at
both the 30 s warm-up step and the 2 s test step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm

from feedersim import _kernels
from feedersim.errors import CapacityError

DEFAULT_POWER_FACTOR = 0.97


@dataclass(frozen=True)
class HouseParams:
    """Per-house thermal and electrical parameters.

    `r_gain` is the fraction of internal gains absorbed directly by the air
    node (the remainder heats the mass node).
    """

    c_air: float            # kJ/degC, thermal mass of indoor air
    c_mass: float           # kJ/degC, thermal mass of indoor solids
    ua: float               # kW/degC, envelope heat-transfer coefficient
    hm: float               # kW/degC, mass-air heat-transfer coefficient
    r_gain: float           # fraction of internal gains to the air node
    deadband_low: float     # degC, thermostat lower limit
    deadband_high: float    # degC, thermostat upper limit
    q_ac_kw: float          # kW thermal, cooling capacity
    power_kw: float         # kW electrical draw while on
    power_factor: float = DEFAULT_POWER_FACTOR

    def __post_init__(self):
        if not (self.deadband_low < self.deadband_high):
            raise ValueError(f"deadband_low must be < deadband_high, got "
                             f"[{self.deadband_low}, {self.deadband_high}]")
        for name in ("c_air", "c_mass", "ua", "hm", "q_ac_kw"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.r_gain <= 1.0:
            raise ValueError("r_gain must be in [0, 1]")
        if not 0.0 < self.power_factor <= 1.0:
            raise ValueError("power_factor must be in (0, 1]")

    @property
    def reactive_kvar(self) -> float:
        """Reactive draw while on, lagging at the rated power factor."""
        return self.power_kw * math.tan(math.acos(self.power_factor))


@dataclass
class HouseState:
    """Dynamic state of one house: two temperatures plus the AC on/off flag."""

    air_temp: float                 # degC
    mass_temp: float                # degC
    on: int                         # 0 or 1
    last_switch_s: float = -math.inf
    duty_cycle: float = math.nan    # natural duty cycle estimate, set at init


@dataclass(frozen=True)
class StepMatrices:
    """Exact discretization of the linear thermal dynamics over one step."""

    dt_s: float
    phi: np.ndarray    # (2, 2) state transition
    gamma: np.ndarray  # (2, 2) input map, A^-1 (phi - I)


def _system_matrix(params: HouseParams) -> np.ndarray:
    # kW / (kJ/degC) = degC/s, so entries are directly in 1/s
    return np.array([
        [-(params.ua + params.hm) / params.c_air, params.hm / params.c_air],
        [params.hm / params.c_mass, -params.hm / params.c_mass],
    ])


def _input_vector(params: HouseParams, on: int, theta_amb: float, q_gain: float) -> np.ndarray:
    return np.array([
        (-on * params.q_ac_kw + params.r_gain * q_gain + params.ua * theta_amb) / params.c_air,
        (1.0 - params.r_gain) * q_gain / params.c_mass,
    ])


def discretize(params: HouseParams, dt_s: float) -> StepMatrices:
    """Precompute the exact step matrices for one house and step size."""
    if dt_s <= 0:
        raise ValueError("dt_s must be positive")
    a = _system_matrix(params)
    phi = expm(a * dt_s)
    gamma = np.linalg.solve(a, phi - np.eye(2))
    return StepMatrices(dt_s=dt_s, phi=phi, gamma=gamma)


def step_house(params: HouseParams, state: HouseState, theta_amb: float,
               q_gain: float, dt_s: float, now_s: float = 0.0,
               matrices: StepMatrices | None = None) -> HouseState:
    """Advance one house by `dt_s` with the AC state held, then apply the thermostat.

    The thermostat switches off below the deadband and on above it; a switch
    stamps `last_switch_s` with the end-of-step time.  `matrices` may be
    passed to reuse a precomputed discretization.
    """
    for name, val in (("theta_amb", theta_amb), ("q_gain", q_gain),
                      ("air_temp", state.air_temp), ("mass_temp", state.mass_temp)):
        if not math.isfinite(val):
            raise ValueError(f"non-finite input: {name}={val}")
    if matrices is None or matrices.dt_s != dt_s:
        matrices = discretize(params, dt_s)
    x = np.array([state.air_temp, state.mass_temp])
    b = _input_vector(params, state.on, theta_amb, q_gain)
    x = matrices.phi @ x + matrices.gamma @ b

    on = state.on
    if x[0] < params.deadband_low:
        on = 0
    elif x[0] > params.deadband_high:
        on = 1
    last_switch = state.last_switch_s if on == state.on else now_s + dt_s
    return replace(state, air_temp=float(x[0]), mass_temp=float(x[1]),
                   on=on, last_switch_s=last_switch)


def equilibrium_air_temp(params: HouseParams, on: int, theta_amb: float,
                         q_gain: float) -> float:
    """Steady-state air temperature with the AC state held indefinitely."""
    a = _system_matrix(params)
    b = _input_vector(params, on, theta_amb, q_gain)
    return float(np.linalg.solve(a, -b)[0])


def mass_equilibrium_temp(params: HouseParams, air_temp: float, q_gain: float) -> float:
    """Mass temperature in equilibrium with a held air temperature."""
    return air_temp + (1.0 - params.r_gain) * q_gain / params.hm


def natural_duty_cycle(params: HouseParams, theta_amb: float, q_gain: float,
                       dt_s: float = 1.0, max_hours: float = 12.0) -> tuple[float, float]:
    """Limit-cycle duty cycle and period under steady ambient conditions.

    Simulates uncontrolled cycling until two consecutive cycles agree within
    1 s in both period and on-time.  Returns (duty, period_s).  Raises
    CapacityError when the AC cannot pull the deadband down; returns
    (0.0, inf) when it is cold enough that the AC never switches on.
    """
    if equilibrium_air_temp(params, 1, theta_amb, q_gain) >= params.deadband_high:
        raise CapacityError(
            f"cooling capacity {params.q_ac_kw} kW cannot hold deadband at "
            f"{theta_amb} degC ambient")
    if equilibrium_air_temp(params, 0, theta_amb, q_gain) <= params.deadband_low:
        return 0.0, math.inf

    matrices = discretize(params, dt_s)
    state = HouseState(air_temp=params.deadband_high,
                       mass_temp=mass_equilibrium_temp(params, params.deadband_high, q_gain),
                       on=1)
    t = 0.0
    last_on_switch = None
    last_off_switch = None
    prev_cycle = None
    max_t = max_hours * 3600.0
    while t < max_t:
        prev_on = state.on
        state = step_house(params, state, theta_amb, q_gain, dt_s, now_s=t,
                           matrices=matrices)
        t += dt_s
        if state.on == prev_on:
            continue
        if state.on == 1:  # off -> on: closes one full cycle
            if last_on_switch is not None and last_off_switch is not None:
                period = t - last_on_switch
                on_time = last_off_switch - last_on_switch
                if prev_cycle is not None:
                    if (abs(period - prev_cycle[0]) <= 1.0
                            and abs(on_time - prev_cycle[1]) <= 1.0):
                        return on_time / period, period
                prev_cycle = (period, on_time)
            last_on_switch = t
        else:
            last_off_switch = t
    raise CapacityError("natural cycling did not settle within "
                        f"{max_hours} hours of simulated time")


@dataclass
class HouseStateArrays:
    """Vectorized house states used by the engine's inner loop."""

    air_temp: np.ndarray        # float64 (n,)
    mass_temp: np.ndarray       # float64 (n,)
    on: np.ndarray              # int8 (n,)
    last_switch_s: np.ndarray   # float64 (n,)
    duty_cycle: np.ndarray      # float64 (n,)

    def copy(self) -> "HouseStateArrays":
        return HouseStateArrays(self.air_temp.copy(), self.mass_temp.copy(),
                                self.on.copy(), self.last_switch_s.copy(),
                                self.duty_cycle.copy())

    def __len__(self) -> int:
        return len(self.air_temp)


class HouseBank:
    """A population of houses with precomputed step matrices per step size.

    Wraps the parameter arrays used by the batch kernels; per-house internal
    gains are held constant (set at population time).
    """

    def __init__(self, params: list[HouseParams], q_gain_kw):
        self.params = list(params)
        n = len(self.params)
        self.n = n
        get = lambda name: np.array([getattr(p, name) for p in self.params])
        self.c_air = get("c_air")
        self.c_mass = get("c_mass")
        self.ua = get("ua")
        self.hm = get("hm")
        self.r_gain = get("r_gain")
        self.deadband_low = get("deadband_low")
        self.deadband_high = get("deadband_high")
        self.q_ac_kw = get("q_ac_kw")
        self.power_kw = get("power_kw")
        self.power_factor = get("power_factor")
        self.reactive_kvar = self.power_kw * np.tan(np.arccos(self.power_factor))
        self.q_gain_kw = np.broadcast_to(np.asarray(q_gain_kw, dtype=float), (n,)).copy()

        # affine decomposition of the air-node input:
        # b_air = b_air_const + theta_amb*b_air_amb + on*b_air_on
        self.b_air_const = self.r_gain * self.q_gain_kw / self.c_air
        self.b_air_amb = self.ua / self.c_air
        self.b_air_on = -self.q_ac_kw / self.c_air
        self.b_mass = (1.0 - self.r_gain) * self.q_gain_kw / self.c_mass
        self._matrices: dict[float, tuple[np.ndarray, np.ndarray]] = {}

    def matrices(self, dt_s: float) -> tuple[np.ndarray, np.ndarray]:
        """(phi, gamma) arrays of shape (n, 4), cached per step size."""
        key = float(dt_s)
        if key not in self._matrices:
            phi = np.empty((self.n, 4))
            gamma = np.empty((self.n, 4))
            for i, p in enumerate(self.params):
                m = discretize(p, key)
                phi[i] = m.phi.ravel()
                gamma[i] = m.gamma.ravel()
            self._matrices[key] = (phi, gamma)
        return self._matrices[key]

    def step(self, states: HouseStateArrays, theta_amb: float, dt_s: float,
             now_s: float) -> np.ndarray:
        """Advance all houses in place; returns the natural-switch mask."""
        phi, gamma = self.matrices(dt_s)
        return _kernels.house_step(
            states.air_temp, states.mass_temp, states.on, states.last_switch_s,
            phi, gamma, self.b_air_const, self.b_air_amb, self.b_air_on,
            self.b_mass, self.deadband_low, self.deadband_high,
            theta_amb, now_s, dt_s)

    def flip_endpoint(self, states: HouseStateArrays, theta_amb: float,
                      horizon_s: float) -> np.ndarray:
        """Air temperature reached `horizon_s` ahead with each AC state flipped."""
        phi, gamma = self.matrices(horizon_s)
        return _kernels.flip_endpoint(
            states.air_temp, states.mass_temp, states.on, phi, gamma,
            self.b_air_const, self.b_air_amb, self.b_air_on, self.b_mass,
            theta_amb)

    def aggregate_power_kw(self, states: HouseStateArrays) -> float:
        """Total electrical draw of the population right now."""
        return float(self.power_kw @ states.on)

    def natural_duty_cycles(self, theta_amb: float, dt_s: float = 1.0,
                            max_hours: float = 12.0,
                            strict: bool = True) -> np.ndarray:
        """Per-house natural duty cycles at a steady ambient (vectorized).

        Same algorithm and convergence rule as `natural_duty_cycle`, run for
        all houses simultaneously.  Houses whose AC never switches on at this
        ambient report 0.0.  With `strict=False`, houses whose (possibly
        hours-long) cycle has not settled within the budget fall back to the
        last measured cycle, or to the quasi-static estimate
        heat-inflow / cooling-capacity when no full cycle completed.
        """
        n = self.n
        on_eq = self._equilibria(1, theta_amb)
        off_eq = self._equilibria(0, theta_amb)
        over = on_eq >= self.deadband_high
        if np.any(over):
            bad = int(np.argmax(over))
            raise CapacityError(
                f"house {bad}: cooling capacity cannot hold deadband at "
                f"{theta_amb} degC ambient")
        never_on = off_eq <= self.deadband_low

        states = HouseStateArrays(
            air_temp=self.deadband_high.copy(),
            mass_temp=self.deadband_high + (1.0 - self.r_gain) * self.q_gain_kw / self.hm,
            on=np.ones(n, dtype=np.int8),
            last_switch_s=np.full(n, -np.inf),
            duty_cycle=np.full(n, np.nan),
        )
        duty = np.where(never_on, 0.0, np.nan)
        last_on = np.full(n, np.nan)
        last_off = np.full(n, np.nan)
        prev_period = np.full(n, np.nan)
        prev_on_time = np.full(n, np.nan)
        done = never_on.copy()

        t = 0.0
        max_t = max_hours * 3600.0
        while t < max_t and not done.all():
            prev = states.on.copy()
            self.step(states, theta_amb, dt_s, t)
            t += dt_s
            turned_on = (prev == 0) & (states.on == 1) & ~done
            turned_off = (prev == 1) & (states.on == 0) & ~done
            if np.any(turned_off):
                last_off[turned_off] = t
            idx = np.flatnonzero(turned_on)
            for i in idx:
                if not (np.isnan(last_on[i]) or np.isnan(last_off[i])):
                    period = t - last_on[i]
                    on_time = last_off[i] - last_on[i]
                    if (not np.isnan(prev_period[i])
                            and abs(period - prev_period[i]) <= 1.0
                            and abs(on_time - prev_on_time[i]) <= 1.0):
                        duty[i] = on_time / period
                        done[i] = True
                    prev_period[i] = period
                    prev_on_time[i] = on_time
                last_on[i] = t
        if not done.all():
            if strict:
                raise CapacityError("natural cycling did not settle for "
                                    f"{int((~done).sum())} houses")
            pending = ~done
            measured = pending & ~np.isnan(prev_period)
            duty[measured] = prev_on_time[measured] / prev_period[measured]
            rough = pending & np.isnan(prev_period)
            if np.any(rough):
                mid = 0.5 * (self.deadband_low + self.deadband_high)
                inflow = self.ua * (theta_amb - mid) + self.q_gain_kw
                duty[rough] = np.clip(inflow[rough] / self.q_ac_kw[rough],
                                      0.0, 1.0)
        return duty

    def _equilibria(self, on: int, theta_amb: float) -> np.ndarray:
        # steady air temp of the 2x2 linear system with the AC state held
        b_air = self.b_air_const + theta_amb * self.b_air_amb + on * self.b_air_on
        # solve A x = -b for the air component; A as in _system_matrix
        a11 = -(self.ua + self.hm) / self.c_air
        a12 = self.hm / self.c_air
        a21 = self.hm / self.c_mass
        a22 = -self.hm / self.c_mass
        det = a11 * a22 - a12 * a21
        return (-b_air * a22 + self.b_mass * a12) / det
