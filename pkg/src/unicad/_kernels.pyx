# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled dense kernels.

Every output element is accumulated from a zero start in ascending order of the
reduction index, one multiply and one add per step (built with
``-ffp-contract=off`` so no fused multiply-add is emitted). This is the same
sequence of roundings the numpy fallback performs, so both backends agree bit
for bit.
"""

import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


cdef void _gemm(const real[:, ::1] a, const real[:, ::1] b, real[:, ::1] c) noexcept nogil:
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, t, j
    cdef real s
    for i in range(m):
        for t in range(k):
            s = a[i, t]
            for j in range(n):
                c[i, j] = c[i, j] + s * b[t, j]


def matmul(a, b):
    if a.dtype != b.dtype:
        raise TypeError("dtype mismatch")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    if a.dtype == np.float32:
        _gemm[float](a, b, out)
    else:
        _gemm[double](a, b, out)
    return out


def bmm(a, b):
    if a.dtype != b.dtype:
        raise TypeError("dtype mismatch")
    cdef Py_ssize_t p, nb = a.shape[0]
    out = np.zeros((nb, a.shape[1], b.shape[2]), dtype=a.dtype)
    cdef float[:, :, ::1] af, bf, of
    cdef double[:, :, ::1] ad, bd, od
    if a.dtype == np.float32:
        af = a
        bf = b
        of = out
        with nogil:
            for p in range(nb):
                _gemm[float](af[p], bf[p], of[p])
    else:
        ad = a
        bd = b
        od = out
        with nogil:
            for p in range(nb):
                _gemm[double](ad[p], bd[p], od[p])
    return out
