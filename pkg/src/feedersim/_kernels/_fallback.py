"""Pure-numpy implementations of the hot simulation kernels.

Used when the compiled extension is unavailable (or FEEDERSIM_PURE=1).
Semantics match `_core.pyx` exactly; only the looping strategy differs
(level-vectorized numpy here, scalar C loops there).
"""

import numpy as np

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)
_STEP_SALT = _U64(0xD1B54A32D192ED03)
_INV_2_53 = 1.0 / 9007199254740992.0  # 2**-53


def _splitmix(z):
    z = (z + _GOLDEN).astype(_U64) if isinstance(z, np.ndarray) else _U64(z + _GOLDEN)
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


def uniform_draws(seed, step, ids):
    """Counter-based uniforms in [0, 1): one draw per (seed, step, id).

    Order-independent and reproducible across platforms; `ids` is a uint64
    array of unit indices.
    """
    with np.errstate(over="ignore"):
        h = _splitmix(_U64(seed))
        h = _splitmix(h ^ (_U64(step) * _STEP_SALT))
        x = _splitmix(np.asarray(ids, dtype=_U64) ^ (h * _GOLDEN))
    return (x >> _U64(11)).astype(np.float64) * _INV_2_53


def house_step(air, mass, on, last_switch, phi, gamma,
               b_air_const, b_air_amb, b_air_on, b_mass,
               deadband_low, deadband_high, theta_amb, now_s, dt_s):
    """Advance all houses one exact linear step, then apply the thermostat.

    State arrays (`air`, `mass`, `on`, `last_switch`) are updated in place.
    `phi`/`gamma` are the per-house discretization matrices flattened to
    (n, 4) rows [m00, m01, m10, m11].  Returns the natural-switch mask.
    """
    b0 = b_air_const + theta_amb * b_air_amb + on * b_air_on
    new_air = phi[:, 0] * air + phi[:, 1] * mass + gamma[:, 0] * b0 + gamma[:, 1] * b_mass
    new_mass = phi[:, 2] * air + phi[:, 3] * mass + gamma[:, 2] * b0 + gamma[:, 3] * b_mass
    new_on = np.where(new_air < deadband_low, 0,
                      np.where(new_air > deadband_high, 1, on)).astype(np.int8)
    switched = new_on != on
    air[:] = new_air
    mass[:] = new_mass
    on[:] = new_on
    last_switch[switched] = now_s + dt_s
    return switched


def flip_endpoint(air, mass, on, phi, gamma,
                  b_air_const, b_air_amb, b_air_on, b_mass, theta_amb):
    """Air temperature reached after one exact step with the on/off state flipped.

    Used for the switch-safety prediction; `phi`/`gamma` are discretized for
    the prediction horizon, not the simulation step.
    """
    flipped = 1 - on
    b0 = b_air_const + theta_amb * b_air_amb + flipped * b_air_on
    return phi[:, 0] * air + phi[:, 1] * mass + gamma[:, 0] * b0 + gamma[:, 1] * b_mass


_OIL_EXP = 0.8
_AGING_REF = 1500.0 / 383.0  # unity aging rate at 110 degC hot spot


def xfmr_step(oil_rise, wind_rise, minutes_aged, load_pu, theta_amb, dt_s,
              tau_wind_s, rated_wind_rise, rated_oil_rise, loss_ratio,
              tau_oil_rated_s, fixed_tau_oil=False):
    """Advance transformer thermal states one exact exponential step.

    Updates `oil_rise`, `wind_rise`, `minutes_aged` in place and returns the
    aging-rate array evaluated at the end-of-step hot-spot temperature.
    """
    lsq = load_pu * load_pu
    oil_ult = rated_oil_rise * ((lsq * loss_ratio + 1.0) / (loss_ratio + 1.0)) ** _OIL_EXP
    wind_ult = rated_wind_rise * np.power(load_pu, 1.6)

    if fixed_tau_oil:
        tau_oil = tau_oil_rated_s
    else:
        # Load-dependent oil time constant: scaled by the normalized step
        # between the initial and ultimate rise (exponent 0.8 self-cooled).
        u = oil_ult / rated_oil_rise
        i = oil_rise / rated_oil_rise
        near = np.abs(u - i) < 1e-9
        denom = np.where(near, 1.0, u ** (1.0 / _OIL_EXP) - i ** (1.0 / _OIL_EXP))
        ratio = np.where(near,
                         _OIL_EXP * np.maximum(i, 1e-30) ** (1.0 - 1.0 / _OIL_EXP),
                         (u - i) / denom)
        ratio = np.where(near & (i < 1e-12), 1.0, ratio)
        tau_oil = tau_oil_rated_s * ratio

    oil_rise[:] = oil_ult + (oil_rise - oil_ult) * np.exp(-dt_s / tau_oil)
    wind_rise[:] = wind_ult + (wind_rise - wind_ult) * np.exp(-dt_s / tau_wind_s)

    hot = theta_amb + oil_rise + wind_rise
    faa = np.exp(_AGING_REF - 1500.0 / (hot + 273.0))
    minutes_aged += faa * (dt_s / 60.0)
    return faa


def _levels(parent, order):
    depth = np.zeros(len(parent), dtype=np.int32)
    for idx in order[1:]:
        depth[idx] = depth[parent[idx]] + 1
    out = []
    for d in range(1, int(depth.max(initial=0)) + 1):
        out.append(order[depth[order] == d])
    return out


def sweep_solve(parent, order, edge_z, edge_tap, s_const, s_curr, s_imp,
                v_nom, v_root, s_base_va, tol_pu, max_iter):
    """Backward/forward sweep on one radial phase network.

    Loads are ZIP-style: `s_const` + `s_curr`*(|V|/Vnom) + `s_imp`*(|V|/Vnom)^2,
    all complex VA consumed at the bus.  `edge_z` is the series impedance of
    the edge to the parent (child-side ohms); `edge_tap` the voltage divisor
    parent -> child (1 for lines).  Returns (v, edge_current, iterations,
    mismatch_pu, worst_index); convergence is on the nodal power residual.
    """
    n = len(parent)
    v = np.empty(n, dtype=np.complex128)
    v[order[0]] = v_root
    levels = _levels(parent, order)
    # flat start scaled down the tap chain
    for lev in levels:
        v[lev] = v[parent[lev]] / edge_tap[lev]

    i_edge = np.zeros(n, dtype=np.complex128)
    mismatch = np.inf
    worst = -1
    iters = 0
    root = order[0]
    nonroot = order[1:]
    for iters in range(1, max_iter + 1):
        vm = np.abs(v) / v_nom
        s_load = s_const + s_curr * vm + s_imp * vm * vm
        i_acc = np.conj(s_load / v)
        for lev in reversed(levels):
            np.add.at(i_acc, parent[lev], i_acc[lev] / edge_tap[lev])
        # after accumulation, the per-node value is the current on its parent edge
        i_edge = i_acc.copy()
        i_edge[root] = 0.0
        for lev in levels:
            v[lev] = v[parent[lev]] / edge_tap[lev] - edge_z[lev] * i_edge[lev]

        vm = np.abs(v) / v_nom
        s_load = s_const + s_curr * vm + s_imp * vm * vm
        child_sum = np.zeros(n, dtype=np.complex128)
        np.add.at(child_sum, parent[nonroot], i_edge[nonroot] / edge_tap[nonroot])
        resid = s_load - v * np.conj(i_edge - child_sum)
        resid[root] = 0.0
        k = int(np.argmax(np.abs(resid)))
        mismatch = float(np.abs(resid[k]) / s_base_va)
        worst = k
        if mismatch < tol_pu:
            break
    return v, i_edge, iters, mismatch, worst
