# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled dense-layer kernels.

Every reduction runs in a fixed sequential order (first term, then += the
rest) so results are bitwise identical to ``dpfed._fallback``.
"""
import numpy as np

cimport numpy as cnp

cnp.import_array()


def dense_forward(const double[:, ::1] x, const double[:, ::1] w, b):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t fan_in = x.shape[1]
    cdef Py_ssize_t fan_out = w.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc
    cdef const double[::1] bias
    cdef bint has_bias = b is not None
    if w.shape[0] != fan_in:
        raise ValueError("weight rows do not match input width")
    if has_bias:
        bias = b
        if bias.shape[0] != fan_out:
            raise ValueError("bias length does not match layer width")
    out = np.empty((n, fan_out), dtype=np.float64)
    cdef double[:, ::1] z = out
    with nogil:
        for i in range(n):
            for j in range(fan_out):
                acc = x[i, 0] * w[0, j]
                for k in range(1, fan_in):
                    acc = acc + x[i, k] * w[k, j]
                if has_bias:
                    acc = acc + bias[j]
                z[i, j] = acc
    return out


def dense_backward(const double[:, ::1] a_prev, const double[:, ::1] dz,
                   const double[:, ::1] w, bint need_input_grad):
    cdef Py_ssize_t n = a_prev.shape[0]
    cdef Py_ssize_t fan_in = a_prev.shape[1]
    cdef Py_ssize_t fan_out = dz.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc
    if dz.shape[0] != n or w.shape[0] != fan_in or w.shape[1] != fan_out:
        raise ValueError("inconsistent shapes in dense_backward")
    dw_arr = np.empty((fan_in, fan_out), dtype=np.float64)
    db_arr = np.empty(fan_out, dtype=np.float64)
    cdef double[:, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef double[:, ::1] da
    with nogil:
        for k in range(fan_in):
            for j in range(fan_out):
                acc = a_prev[0, k] * dz[0, j]
                for i in range(1, n):
                    acc = acc + a_prev[i, k] * dz[i, j]
                dw[k, j] = acc
        for j in range(fan_out):
            acc = dz[0, j]
            for i in range(1, n):
                acc = acc + dz[i, j]
            db[j] = acc
    if not need_input_grad:
        return dw_arr, db_arr, None
    da_arr = np.empty((n, fan_in), dtype=np.float64)
    da = da_arr
    with nogil:
        for i in range(n):
            for k in range(fan_in):
                acc = dz[i, 0] * w[k, 0]
                for j in range(1, fan_out):
                    acc = acc + dz[i, j] * w[k, j]
                da[i, k] = acc
    return dw_arr, db_arr, da_arr
