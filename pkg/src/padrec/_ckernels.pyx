# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: Kendall pair counting and pairwise L1 distances.

Both are quadratic loops that numpy can only vectorize with O(n^2) (or
O(n*m*d)) temporaries; the straight C loops here stay cache-friendly and
allocation-free. padrec._speedups selects these at import when available.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def kendall_counts(double[::1] a, double[::1] b):
    """Count (concordant, discordant) index pairs i < j of the two sequences.

    Tied pairs in either sequence count as neither.
    """
    cdef Py_ssize_t n = a.shape[0]
    if b.shape[0] != n:
        raise ValueError("kendall_counts: length mismatch")
    cdef Py_ssize_t i, j
    cdef long long conc = 0, disc = 0
    cdef double da, db
    for i in range(n):
        for j in range(i + 1, n):
            da = a[i] - a[j]
            db = b[i] - b[j]
            if da == 0.0 or db == 0.0:
                continue
            if (da > 0.0) == (db > 0.0):
                conc += 1
            else:
                disc += 1
    return conc, disc


def pairwise_l1(double[:, ::1] x, double[:, ::1] y):
    """L1 distance matrix: out[i, j] = sum_k |x[i, k] - y[j, k]|."""
    cdef Py_ssize_t n = x.shape[0], m = y.shape[0], d = x.shape[1]
    if y.shape[1] != d:
        raise ValueError("pairwise_l1: dimension mismatch")
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double acc, diff
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(d):
                diff = x[i, k] - y[j, k]
                acc += diff if diff >= 0.0 else -diff
            out[i, j] = acc
    return out_arr


def pairwise_l1_backward(double[:, ::1] x, double[:, ::1] y, double[:, ::1] g):
    """Gradients of sum(g * pairwise_l1(x, y)) w.r.t. x and y.

    Uses sign(0) = 0, matching np.sign on exact ties.
    """
    cdef Py_ssize_t n = x.shape[0], m = y.shape[0], d = x.shape[1]
    if y.shape[1] != d or g.shape[0] != n or g.shape[1] != m:
        raise ValueError("pairwise_l1_backward: shape mismatch")
    gx_arr = np.zeros((n, d), dtype=np.float64)
    gy_arr = np.zeros((m, d), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[:, ::1] gy = gy_arr
    cdef Py_ssize_t i, j, k
    cdef double s, gij, diff
    for i in range(n):
        for j in range(m):
            gij = g[i, j]
            if gij == 0.0:
                continue
            for k in range(d):
                diff = x[i, k] - y[j, k]
                if diff > 0.0:
                    s = gij
                elif diff < 0.0:
                    s = -gij
                else:
                    continue
                gx[i, k] += s
                gy[j, k] -= s
    return gx_arr, gy_arr
