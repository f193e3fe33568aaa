# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Euler-Maruyama stepping for the built-in models.

Hot loops only: plain and reversed-dynamics (adjoint) stepping with
log-weight accumulation. The arithmetic must stay bit-identical to the
numpy fallback in ``integrator``: same operation order, no fused
multiply-adds (setup.py passes -ffp-contract=off), and noise always comes
pre-generated from ``rng``.
"""

from libc.math cimport isfinite

MODEL_BROWNIAN = 0
MODEL_OU = 1
MODEL_CELL = 2

DEF CELL_C4 = 0.0625  # 2^-4


cdef int _sim_ou(double[:, :, ::1] states, double[:, :, ::1] noise,
                 double[::1] logw, double dt, double sqrt_dt, bint adjoint,
                 double theta, double sig,
                 Py_ssize_t* bad_n, Py_ssize_t* bad_l) noexcept nogil:
    cdef Py_ssize_t B = states.shape[0]
    cdef Py_ssize_t L = states.shape[1] - 1
    cdef Py_ssize_t d = states.shape[2]
    cdef Py_ssize_t n, l, i
    cdef double x, fv, xn, lw, c
    cdef double dd = (-theta) * (<double> d)
    cdef bint bad
    for n in range(B):
        lw = 0.0
        for l in range(L):
            bad = 0
            for i in range(d):
                x = states[n, l, i]
                fv = -theta * x
                if adjoint:
                    fv = 0.0 - fv
                xn = x + dt * fv + sqrt_dt * (sig * noise[n, l, i])
                states[n, l + 1, i] = xn
                if not isfinite(xn):
                    bad = 1
            if adjoint:
                c = 0.0 - dd
                lw = lw + c * dt
            if bad or not isfinite(lw):
                bad_n[0] = n
                bad_l[0] = l
                return 1
        logw[n] = lw
    return 0


cdef int _sim_brownian(double[:, :, ::1] states, double[:, :, ::1] noise,
                       double[::1] logw, double dt, double sqrt_dt,
                       double sig,
                       Py_ssize_t* bad_n, Py_ssize_t* bad_l) noexcept nogil:
    cdef Py_ssize_t B = states.shape[0]
    cdef Py_ssize_t L = states.shape[1] - 1
    cdef Py_ssize_t d = states.shape[2]
    cdef Py_ssize_t n, l, i
    cdef double x, xn
    cdef bint bad
    for n in range(B):
        for l in range(L):
            bad = 0
            for i in range(d):
                x = states[n, l, i]
                xn = x + dt * 0.0 + sqrt_dt * (sig * noise[n, l, i])
                states[n, l + 1, i] = xn
                if not isfinite(xn):
                    bad = 1
            if bad:
                bad_n[0] = n
                bad_l[0] = l
                return 1
        logw[n] = 0.0
    return 0


cdef int _sim_cell(double[:, :, ::1] states, double[:, :, ::1] noise,
                   double[::1] logw, double dt, double sqrt_dt, bint adjoint,
                   double sig,
                   Py_ssize_t* bad_n, Py_ssize_t* bad_l) noexcept nogil:
    cdef Py_ssize_t B = states.shape[0]
    cdef Py_ssize_t L = states.shape[1] - 1
    cdef Py_ssize_t n, l
    cdef double x1, x2, x1_2, x2_2, x1_3, x2_3, x1_4, x2_4, q1, q2
    cdef double f1, f2, dd1, dd2, c, lw, xn1, xn2
    for n in range(B):
        lw = 0.0
        for l in range(L):
            x1 = states[n, l, 0]
            x2 = states[n, l, 1]
            x1_2 = x1 * x1
            x2_2 = x2 * x2
            x1_4 = x1_2 * x1_2
            x2_4 = x2_2 * x2_2
            q1 = CELL_C4 + x1_4
            q2 = CELL_C4 + x2_4
            f1 = x1_4 / q1 + CELL_C4 / q2 - x1
            f2 = x2_4 / q2 + CELL_C4 / q1 - x2
            if adjoint:
                f1 = 0.0 - f1
                f2 = 0.0 - f2
                x1_3 = x1_2 * x1
                x2_3 = x2_2 * x2
                dd1 = 4.0 * x1_3 * CELL_C4 / (q1 * q1) - 1.0
                dd2 = 4.0 * x2_3 * CELL_C4 / (q2 * q2) - 1.0
                c = 0.0 - (dd1 + dd2)
                lw = lw + c * dt
            xn1 = x1 + dt * f1 + sqrt_dt * (sig * noise[n, l, 0])
            xn2 = x2 + dt * f2 + sqrt_dt * (sig * noise[n, l, 1])
            states[n, l + 1, 0] = xn1
            states[n, l + 1, 1] = xn2
            if not isfinite(xn1) or not isfinite(xn2) or not isfinite(lw):
                bad_n[0] = n
                bad_l[0] = l
                return 1
        logw[n] = lw
    return 0


def sim_block(int model_id, tuple params, bint adjoint,
              double[:, :, ::1] states, double[:, :, ::1] noise,
              double[::1] logw, double dt, double sqrt_dt):
    """Advance one block of paths in place.

    ``states[:, 0, :]`` holds the initial values on entry; on success the
    remaining time slices and ``logw`` are filled. Returns
    ``(status, path, step)`` with status 0 on success and 1 when a
    non-finite value appeared (path/step are block-local indices).
    """
    cdef Py_ssize_t bad_n = -1
    cdef Py_ssize_t bad_l = -1
    cdef int status
    cdef double theta, sig
    if model_id == MODEL_OU:
        theta = params[0]
        sig = params[1]
        with nogil:
            status = _sim_ou(states, noise, logw, dt, sqrt_dt, adjoint,
                             theta, sig, &bad_n, &bad_l)
    elif model_id == MODEL_BROWNIAN:
        sig = params[0]
        with nogil:
            status = _sim_brownian(states, noise, logw, dt, sqrt_dt, sig,
                                   &bad_n, &bad_l)
    elif model_id == MODEL_CELL:
        sig = params[0]
        if states.shape[2] != 2:
            raise ValueError("cell kernel requires dimension 2")
        with nogil:
            status = _sim_cell(states, noise, logw, dt, sqrt_dt, adjoint,
                               sig, &bad_n, &bad_l)
    else:
        raise ValueError(f"unknown kernel model id {model_id}")
    return status, bad_n, bad_l
