# cython: language_level=3
"""Compiled point-cloud kernels.

Every function here has a numpy twin in :mod:`trafficflow._pykernels` with the
same signature: index outputs agree exactly, densities agree to rounding.
:mod:`trafficflow.kernels` picks one at import time.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, floor

cnp.import_array()


def knn_indices(const double[:, ::1] query, const double[:, ::1] target, Py_ssize_t k):
    cdef Py_ssize_t n = query.shape[0]
    cdef Py_ssize_t m = target.shape[0]
    cdef Py_ssize_t dim = query.shape[1]
    cdef Py_ssize_t i, j, c, pos, count
    cdef double d, diff
    if k > m:
        raise ValueError(f"k={k} exceeds target size {m}")
    out = np.empty((n, k), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] idx = out
    cdef double[::1] best = np.empty(k if k > 0 else 1, dtype=np.float64)
    for i in range(n):
        count = 0
        for j in range(m):
            d = 0.0
            for c in range(dim):
                diff = query[i, c] - target[j, c]
                d += diff * diff
            if count < k:
                pos = count
                count += 1
            elif d < best[k - 1]:
                pos = k - 1
            else:
                continue
            # strict comparison keeps the lower index first on ties
            while pos > 0 and best[pos - 1] > d:
                best[pos] = best[pos - 1]
                idx[i, pos] = idx[i, pos - 1]
                pos -= 1
            best[pos] = d
            idx[i, pos] = j
    return out


def farthest_point_sampling(const double[:, ::1] points, Py_ssize_t m, Py_ssize_t seed_index):
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t dim = points.shape[1]
    cdef Py_ssize_t i, j, c, last, arg
    cdef double d, diff, best
    if m > n or m < 1:
        raise ValueError(f"cannot sample {m} of {n} points")
    out = np.empty(m, dtype=np.int64)
    cdef cnp.int64_t[::1] sel = out
    cdef double[::1] mind = np.full(n, np.inf, dtype=np.float64)
    cdef cnp.uint8_t[::1] taken = np.zeros(n, dtype=np.uint8)
    if seed_index < 0 or seed_index >= n:
        raise ValueError(f"seed index {seed_index} out of range")
    sel[0] = seed_index
    taken[seed_index] = 1
    last = seed_index
    for i in range(1, m):
        arg = -1
        best = -1.0
        for j in range(n):
            if taken[j]:
                continue
            d = 0.0
            for c in range(dim):
                diff = points[j, c] - points[last, c]
                d += diff * diff
            if d < mind[j]:
                mind[j] = d
            if mind[j] > best:
                best = mind[j]
                arg = j
        sel[i] = arg
        taken[arg] = 1
        last = arg
    return out


def voxelize_2d(const double[:, ::1] xy, double origin_x, double origin_y,
                double cell_size, Py_ssize_t rows, Py_ssize_t cols):
    cdef Py_ssize_t n = xy.shape[0]
    cdef Py_ssize_t i, r, c
    out = np.empty((n, 2), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] cells = out
    for i in range(n):
        r = <Py_ssize_t> floor((xy[i, 0] - origin_x) / cell_size)
        c = <Py_ssize_t> floor((xy[i, 1] - origin_y) / cell_size)
        if r < 0 or r >= rows or c < 0 or c >= cols:
            r = -1
            c = -1
        cells[i, 0] = r
        cells[i, 1] = c
    return out


def gaussian_kde(const double[:, ::1] points, double bandwidth):
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t dim = points.shape[1]
    cdef Py_ssize_t i, j, c
    cdef double d, diff, acc
    cdef double scale = 1.0 / (2.0 * bandwidth * bandwidth)
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] nu = out
    for i in range(n):
        acc = 0.0
        for j in range(n):
            d = 0.0
            for c in range(dim):
                diff = points[i, c] - points[j, c]
                d += diff * diff
            acc += exp(-d * scale)
        nu[i] = acc / n
    return out
