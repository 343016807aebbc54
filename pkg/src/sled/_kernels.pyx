# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled pairwise-sum kernels for the distance estimators.

All sums accumulate at 64-bit in row-major order: one partial sum per row,
rows added in index order.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, pow, exp

cnp.import_array()


cdef inline double _sqdist(const double[:, ::1] X, Py_ssize_t i,
                           const double[:, ::1] Y, Py_ssize_t j,
                           Py_ssize_t dim) noexcept nogil:
    cdef double acc = 0.0, diff
    cdef Py_ssize_t k
    for k in range(dim):
        diff = X[i, k] - Y[j, k]
        acc += diff * diff
    return acc


cdef inline double _semimetric(double sq, double beta) noexcept nogil:
    if beta == 1.0:
        return sqrt(sq)
    if beta == 2.0:
        return sq
    if sq == 0.0:
        return 0.0
    return pow(sq, 0.5 * beta)


def pairwise_distance(const double[:, ::1] X, const double[:, ::1] Y, double beta):
    cdef Py_ssize_t n = X.shape[0], m = Y.shape[0], dim = X.shape[1]
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] D = out
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            for j in range(m):
                D[i, j] = _semimetric(_sqdist(X, i, Y, j, dim), beta)
    return out


def distance_sum(const double[:, ::1] X, const double[:, ::1] Y, double beta):
    cdef Py_ssize_t n = X.shape[0], m = Y.shape[0], dim = X.shape[1]
    cdef Py_ssize_t i, j
    cdef double total = 0.0, row
    with nogil:
        for i in range(n):
            row = 0.0
            for j in range(m):
                row += _semimetric(_sqdist(X, i, Y, j, dim), beta)
            total += row
    return total


def rbf_sum(const double[:, ::1] X, const double[:, ::1] Y, double bandwidth):
    cdef Py_ssize_t n = X.shape[0], m = Y.shape[0], dim = X.shape[1]
    cdef Py_ssize_t i, j
    cdef double total = 0.0, row
    cdef double scale = -1.0 / (2.0 * bandwidth * bandwidth)
    with nogil:
        for i in range(n):
            row = 0.0
            for j in range(m):
                row += exp(scale * _sqdist(X, i, Y, j, dim))
            total += row
    return total
