# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops; see _pykernels for the reference semantics."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def assign_nearest(const double[:, ::1] points, const double[:, ::1] centroids):
    cdef Py_ssize_t n = points.shape[0], d = points.shape[1], k = centroids.shape[0]
    cdef Py_ssize_t i, j, c
    cdef double best, dist, diff
    cdef Py_ssize_t arg
    labels = np.empty(n, dtype=np.int64)
    sqdist = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] lab = labels
    cdef double[::1] sq = sqdist
    with nogil:
        for i in range(n):
            best = 0.0
            arg = 0
            for c in range(k):
                dist = 0.0
                for j in range(d):
                    diff = points[i, j] - centroids[c, j]
                    dist = dist + diff * diff
                if c == 0 or dist < best:
                    best = dist
                    arg = c
            lab[i] = arg
            sq[i] = best
    return labels, sqdist


def batch_mean_sq_errors(const double[:, ::1] G, const cnp.int64_t[:, ::1] idx,
                         const double[::1] mu):
    cdef Py_ssize_t t = idx.shape[0], m = idx.shape[1], p = G.shape[1]
    cdef Py_ssize_t r, j, q
    cdef double total, diff
    cdef double inv_m = 1.0 / m
    out = np.empty(t, dtype=np.float64)
    cdef double[::1] res = out
    acc_arr = np.empty(p, dtype=np.float64)
    cdef double[::1] acc = acc_arr
    with nogil:
        for r in range(t):
            for q in range(p):
                acc[q] = G[idx[r, 0], q]
            for j in range(1, m):
                for q in range(p):
                    acc[q] = acc[q] + G[idx[r, j], q]
            total = 0.0
            for q in range(p):
                diff = acc[q] * inv_m - mu[q]
                total = total + diff * diff
            res[r] = total
    return out
