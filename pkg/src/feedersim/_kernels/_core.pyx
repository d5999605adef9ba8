# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the hot simulation kernels.

Semantics match `_fallback.py`; scalar C loops replace the vectorized
numpy paths.  See that module for parameter documentation.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, pow, sqrt

cnp.import_array()

ctypedef cnp.uint64_t u64
ctypedef cnp.complex128_t cplx

cdef u64 _GOLDEN = 0x9E3779B97F4A7C15ULL
cdef u64 _MIX1 = 0xBF58476D1CE4E5B9ULL
cdef u64 _MIX2 = 0x94D049BB133111EBULL
cdef u64 _STEP_SALT = 0xD1B54A32D192ED03ULL
cdef double _INV_2_53 = 1.0 / 9007199254740992.0


cdef inline u64 _splitmix(u64 z) nogil:
    z = z + _GOLDEN
    z = (z ^ (z >> 30)) * _MIX1
    z = (z ^ (z >> 27)) * _MIX2
    return z ^ (z >> 31)


def uniform_draws(seed, step, ids):
    cdef u64 h = _splitmix(<u64> seed)
    h = _splitmix(h ^ ((<u64> step) * _STEP_SALT))
    cdef u64[::1] idv = np.ascontiguousarray(ids, dtype=np.uint64)
    cdef Py_ssize_t n = idv.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i
    cdef u64 x
    for i in range(n):
        x = _splitmix(idv[i] ^ (h * _GOLDEN))
        ov[i] = <double> (x >> 11) * _INV_2_53
    return out


def house_step(double[::1] air, double[::1] mass, cnp.int8_t[::1] on,
               double[::1] last_switch,
               double[:, ::1] phi, double[:, ::1] gamma,
               double[::1] b_air_const, double[::1] b_air_amb,
               double[::1] b_air_on, double[::1] b_mass,
               double[::1] deadband_low, double[::1] deadband_high,
               double theta_amb, double now_s, double dt_s):
    cdef Py_ssize_t n = air.shape[0]
    switched = np.zeros(n, dtype=bool)
    cdef cnp.uint8_t[::1] sw = switched.view(np.uint8)
    cdef Py_ssize_t i
    cdef double b0, na, nm
    cdef cnp.int8_t new_on
    for i in range(n):
        b0 = b_air_const[i] + theta_amb * b_air_amb[i] + on[i] * b_air_on[i]
        na = phi[i, 0] * air[i] + phi[i, 1] * mass[i] \
            + gamma[i, 0] * b0 + gamma[i, 1] * b_mass[i]
        nm = phi[i, 2] * air[i] + phi[i, 3] * mass[i] \
            + gamma[i, 2] * b0 + gamma[i, 3] * b_mass[i]
        if na < deadband_low[i]:
            new_on = 0
        elif na > deadband_high[i]:
            new_on = 1
        else:
            new_on = on[i]
        if new_on != on[i]:
            sw[i] = 1
            last_switch[i] = now_s + dt_s
        air[i] = na
        mass[i] = nm
        on[i] = new_on
    return switched


def flip_endpoint(double[::1] air, double[::1] mass, cnp.int8_t[::1] on,
                  double[:, ::1] phi, double[:, ::1] gamma,
                  double[::1] b_air_const, double[::1] b_air_amb,
                  double[::1] b_air_on, double[::1] b_mass, double theta_amb):
    cdef Py_ssize_t n = air.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i
    cdef double b0
    cdef int flipped
    for i in range(n):
        flipped = 1 - on[i]
        b0 = b_air_const[i] + theta_amb * b_air_amb[i] + flipped * b_air_on[i]
        ov[i] = phi[i, 0] * air[i] + phi[i, 1] * mass[i] \
            + gamma[i, 0] * b0 + gamma[i, 1] * b_mass[i]
    return out


cdef double _OIL_EXP = 0.8
cdef double _AGING_REF = 1500.0 / 383.0


def xfmr_step(double[::1] oil_rise, double[::1] wind_rise,
              double[::1] minutes_aged, double[::1] load_pu,
              double theta_amb, double dt_s,
              double[::1] tau_wind_s, double[::1] rated_wind_rise,
              double[::1] rated_oil_rise, double[::1] loss_ratio,
              double[::1] tau_oil_rated_s, bint fixed_tau_oil=False):
    cdef Py_ssize_t n = oil_rise.shape[0]
    faa = np.empty(n, dtype=np.float64)
    cdef double[::1] fv = faa
    cdef Py_ssize_t i
    cdef double lsq, oil_ult, wind_ult, u, v, tau_oil, ratio, hot, base
    for i in range(n):
        lsq = load_pu[i] * load_pu[i]
        oil_ult = rated_oil_rise[i] * pow(
            (lsq * loss_ratio[i] + 1.0) / (loss_ratio[i] + 1.0), _OIL_EXP)
        wind_ult = rated_wind_rise[i] * pow(load_pu[i], 1.6)
        if fixed_tau_oil:
            tau_oil = tau_oil_rated_s[i]
        else:
            u = oil_ult / rated_oil_rise[i]
            v = oil_rise[i] / rated_oil_rise[i]
            if fabs(u - v) < 1e-9:
                if v < 1e-12:
                    ratio = 1.0
                else:
                    base = v if v > 1e-30 else 1e-30
                    ratio = _OIL_EXP * pow(base, 1.0 - 1.0 / _OIL_EXP)
            else:
                ratio = (u - v) / (pow(u, 1.0 / _OIL_EXP) - pow(v, 1.0 / _OIL_EXP))
            tau_oil = tau_oil_rated_s[i] * ratio
        oil_rise[i] = oil_ult + (oil_rise[i] - oil_ult) * exp(-dt_s / tau_oil)
        wind_rise[i] = wind_ult + (wind_rise[i] - wind_ult) * exp(-dt_s / tau_wind_s[i])
        hot = theta_amb + oil_rise[i] + wind_rise[i]
        fv[i] = exp(_AGING_REF - 1500.0 / (hot + 273.0))
        minutes_aged[i] += fv[i] * (dt_s / 60.0)
    return faa


def sweep_solve(cnp.int32_t[::1] parent, cnp.int32_t[::1] order,
                cplx[::1] edge_z, double[::1] edge_tap,
                cplx[::1] s_const, cplx[::1] s_curr, cplx[::1] s_imp,
                double[::1] v_nom, double complex v_root, double s_base_va,
                double tol_pu, int max_iter):
    cdef Py_ssize_t n = parent.shape[0]
    v_arr = np.empty(n, dtype=np.complex128)
    i_arr = np.zeros(n, dtype=np.complex128)
    cdef cplx[::1] v = v_arr
    cdef cplx[::1] i_edge = i_arr
    i_acc_arr = np.zeros(n, dtype=np.complex128)
    child_arr = np.zeros(n, dtype=np.complex128)
    cdef cplx[::1] i_acc = i_acc_arr
    cdef cplx[::1] child_sum = child_arr
    cdef Py_ssize_t k, idx, p
    cdef double vm, mismatch, r
    cdef double complex s_load, resid
    cdef int iters = 0
    cdef Py_ssize_t worst = -1
    cdef Py_ssize_t root = order[0]

    v[root] = v_root
    for k in range(1, n):
        idx = order[k]
        v[idx] = v[parent[idx]] / edge_tap[idx]

    mismatch = 1e300
    for iters in range(1, max_iter + 1):
        for k in range(n):
            idx = order[k]
            vm = sqrt(v[idx].real * v[idx].real + v[idx].imag * v[idx].imag) / v_nom[idx]
            s_load = s_const[idx] + s_curr[idx] * vm + s_imp[idx] * vm * vm
            i_acc[idx] = (s_load / v[idx]).conjugate()
        for k in range(n - 1, 0, -1):
            idx = order[k]
            i_acc[parent[idx]] = i_acc[parent[idx]] + i_acc[idx] / edge_tap[idx]
        for k in range(n):
            i_edge[k] = i_acc[k]
        i_edge[root] = 0.0
        for k in range(1, n):
            idx = order[k]
            v[idx] = v[parent[idx]] / edge_tap[idx] - edge_z[idx] * i_edge[idx]

        for k in range(n):
            child_sum[k] = 0.0
        for k in range(1, n):
            idx = order[k]
            child_sum[parent[idx]] = child_sum[parent[idx]] + i_edge[idx] / edge_tap[idx]
        mismatch = 0.0
        worst = root
        for k in range(1, n):
            idx = order[k]
            vm = sqrt(v[idx].real * v[idx].real + v[idx].imag * v[idx].imag) / v_nom[idx]
            s_load = s_const[idx] + s_curr[idx] * vm + s_imp[idx] * vm * vm
            resid = s_load - v[idx] * (i_edge[idx] - child_sum[idx]).conjugate()
            r = sqrt(resid.real * resid.real + resid.imag * resid.imag)
            if r > mismatch:
                mismatch = r
                worst = idx
        mismatch = mismatch / s_base_va
        if mismatch < tol_pu:
            break
    return v_arr, i_arr, iters, mismatch, <int> worst
