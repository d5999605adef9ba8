"""Distribution-transformer thermal dynamics and insulation aging.

Two first-order states relax toward load-dependent ultimate values: the
top-oil rise over ambient and the winding hot-spot rise over top oil.  The
hot-spot temperature (ambient + both rises) drives an exponential aging
rate that equals 1.0 at 110 degC.  Thermal data for single-phase units from
5 to 175 kVA is interpolated linearly in rating between the table endpoints
below; the rated oil time constant follows the standard mass-based
procedure (thermal capacity from oil volume and weights, divided into the
rated loss and rise).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from feedersim import _kernels

RATING_RANGE_KVA = (5.0, 175.0)

# (value at 5 kVA, value at 175 kVA); interpolated linearly in rating
_TABLE = {
    "full_load_loss_pu": (0.0232, 0.0112),
    "no_load_loss_pu": (0.0065, 0.0042),
    "oil_volume_gal": (5.7, 62.7),
    "core_coil_weight_lb": (56.6, 484.9),
    "tank_fittings_weight_lb": (67.9, 581.9),
}

DEFAULT_WINDING_TAU_S = 5.0 * 60.0      # winding time constant, 5 min
DEFAULT_WINDING_RISE_C = 80.0           # rated hot-spot rise over top oil
DEFAULT_OIL_RISE_C = 60.0               # rated top-oil rise over ambient

OIL_EXPONENT = 0.8                      # self-cooled oil rise exponent
WINDING_EXPONENT = 1.6
_AGING_REF = 1500.0 / 383.0             # unity aging at 110 degC


@dataclass(frozen=True)
class XfmrThermalParams:
    """Thermal parameters of one single-phase distribution transformer."""

    winding_tau_s: float = DEFAULT_WINDING_TAU_S
    rated_winding_rise_c: float = DEFAULT_WINDING_RISE_C
    rated_oil_rise_c: float = DEFAULT_OIL_RISE_C
    full_load_loss_pu: float = 0.0232
    no_load_loss_pu: float = 0.0065
    oil_volume_gal: float = 5.7
    core_coil_weight_lb: float = 56.6
    tank_fittings_weight_lb: float = 67.9
    oil_tau_rated_s: float = 0.0  # derived when built via params_for_rating

    def __post_init__(self):
        for name in ("winding_tau_s", "rated_winding_rise_c", "rated_oil_rise_c",
                     "full_load_loss_pu", "no_load_loss_pu", "oil_volume_gal",
                     "core_coil_weight_lb", "tank_fittings_weight_lb"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.full_load_loss_pu <= self.no_load_loss_pu:
            raise ValueError("full-load loss must exceed no-load loss")

    @property
    def loss_ratio(self) -> float:
        """Rated load loss over no-load loss (drives the oil ultimate rise)."""
        return self.full_load_loss_pu / self.no_load_loss_pu

    def thermal_capacity_wh_per_c(self) -> float:
        """Lumped thermal capacity of the oil/core/tank assembly, Wh/degC."""
        return (0.06 * self.core_coil_weight_lb
                + 0.04 * self.tank_fittings_weight_lb
                + 1.33 * self.oil_volume_gal)

    def rated_oil_tau_s(self, rating_kva: float) -> float:
        """Rated top-oil time constant: capacity * rated rise / rated total loss."""
        total_loss_w = (self.full_load_loss_pu + self.no_load_loss_pu) * rating_kva * 1000.0
        hours = self.thermal_capacity_wh_per_c() * self.rated_oil_rise_c / total_loss_w
        return hours * 3600.0


def params_for_rating(rating_kva: float) -> XfmrThermalParams:
    """Interpolated thermal parameters for a rating within the table range."""
    lo, hi = RATING_RANGE_KVA
    if not lo <= rating_kva <= hi:
        raise ValueError(f"rating {rating_kva} kVA outside the tabulated range "
                         f"[{lo}, {hi}]; supply explicit thermal parameters")
    t = (rating_kva - lo) / (hi - lo)
    interp = {k: a + t * (b - a) for k, (a, b) in _TABLE.items()}
    p = XfmrThermalParams(**interp)
    return replace(p, oil_tau_rated_s=p.rated_oil_tau_s(rating_kva))


def resolve_params(params: XfmrThermalParams | None,
                   rating_kva: float) -> XfmrThermalParams:
    """Fill in defaults: interpolate by rating or derive a missing oil tau."""
    if params is None:
        return params_for_rating(rating_kva)
    if params.oil_tau_rated_s <= 0:
        return replace(params, oil_tau_rated_s=params.rated_oil_tau_s(rating_kva))
    return params


@dataclass
class TransformerThermalState:
    """Thermal state plus accumulated equivalent aging of one transformer."""

    oil_rise_c: float = 0.0      # top-oil rise over ambient
    winding_rise_c: float = 0.0  # hot-spot rise over top oil
    minutes_aged: float = 0.0
    aging_rate: float = 0.0      # rate at the most recent step


def ultimate_rises(params: XfmrThermalParams, load_pu: float) -> tuple[float, float]:
    """Ultimate (winding, oil) rises if `load_pu` were sustained indefinitely."""
    if load_pu < 0:
        raise ValueError("load_pu must be nonnegative")
    wind = params.rated_winding_rise_c * load_pu ** WINDING_EXPONENT
    ratio = params.loss_ratio
    oil = params.rated_oil_rise_c * (
        (load_pu * load_pu * ratio + 1.0) / (ratio + 1.0)) ** OIL_EXPONENT
    return wind, oil


def aging_rate(winding_temp_c: float) -> float:
    """Aging acceleration factor at a hot-spot temperature; 1.0 at 110 degC."""
    if winding_temp_c <= -273.0:
        raise ValueError("winding temperature below absolute zero")
    return math.exp(_AGING_REF - 1500.0 / (winding_temp_c + 273.0))


def accumulate_aging(state: TransformerThermalState, faa: float,
                     dt_s: float) -> TransformerThermalState:
    """Accrue `faa` worth of equivalent aging over `dt_s`."""
    if dt_s <= 0:
        raise ValueError("dt_s must be positive")
    return replace(state, minutes_aged=state.minutes_aged + faa * dt_s / 60.0,
                   aging_rate=faa)


def hotspot_c(state: TransformerThermalState, theta_amb: float) -> float:
    """Hot-spot temperature: ambient plus both rises."""
    return theta_amb + state.oil_rise_c + state.winding_rise_c


def step_thermal(params: XfmrThermalParams, state: TransformerThermalState,
                 load_pu: float, theta_amb: float, dt_s: float,
                 fixed_tau_oil: bool = False) -> TransformerThermalState:
    """Advance both rises one exact exponential step and accrue aging.

    The oil time constant is corrected for the distance between the present
    and ultimate rise unless `fixed_tau_oil` is set (useful for tests).
    """
    if dt_s <= 0:
        raise ValueError("dt_s must be positive")
    for name, val in (("load_pu", load_pu), ("theta_amb", theta_amb)):
        if not math.isfinite(val):
            raise ValueError(f"non-finite input: {name}={val}")
    if params.oil_tau_rated_s <= 0:
        raise ValueError("params.oil_tau_rated_s is unset; build the parameters "
                         "with params_for_rating or resolve_params")
    oil = np.array([state.oil_rise_c])
    wind = np.array([state.winding_rise_c])
    aged = np.array([state.minutes_aged])
    tau_oil = params.oil_tau_rated_s
    faa = _kernels.xfmr_step(
        oil, wind, aged, np.array([float(load_pu)]), theta_amb, dt_s,
        np.array([params.winding_tau_s]),
        np.array([params.rated_winding_rise_c]),
        np.array([params.rated_oil_rise_c]),
        np.array([params.loss_ratio]),
        np.array([tau_oil]),
        fixed_tau_oil)
    return TransformerThermalState(oil_rise_c=float(oil[0]),
                                   winding_rise_c=float(wind[0]),
                                   minutes_aged=float(aged[0]),
                                   aging_rate=float(faa[0]))
