# cython: boundscheck=False, wraparound=False, cdivision=True
"""Cython implementations of the hot geometric kernels.

Semantics match kernels.numpy_backend exactly, including tie-breaking.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, floor

cnp.import_array()

BACKEND_NAME = "cython"


def nearest_neighbor(query, ref):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] q = np.ascontiguousarray(query, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] r = np.ascontiguousarray(ref, dtype=np.float64)
    cdef Py_ssize_t n = q.shape[0], m = r.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] idx = np.empty(n, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dist = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t i, j, best
    cdef double dx, dy, dz, d2, bd
    for i in range(n):
        best = 0
        bd = 1e300
        for j in range(m):
            dx = q[i, 0] - r[j, 0]
            dy = q[i, 1] - r[j, 1]
            dz = q[i, 2] - r[j, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < bd:
                bd = d2
                best = j
        idx[i] = best
        dist[i] = sqrt(bd)
    return idx, dist


def knn(query, ref, Py_ssize_t k):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] q = np.ascontiguousarray(query, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] r = np.ascontiguousarray(ref, dtype=np.float64)
    cdef Py_ssize_t n = q.shape[0], m = r.shape[0]
    if k > m:
        raise ValueError(f"k={k} exceeds reference size {m}")
    cdef cnp.ndarray[cnp.int64_t, ndim=2] idx = np.empty((n, k), dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dist = np.empty((n, k), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] d2buf = np.empty(m, dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] used = np.empty(m, dtype=np.uint8)
    cdef Py_ssize_t i, j, t, best
    cdef double dx, dy, dz, bd
    for i in range(n):
        for j in range(m):
            dx = q[i, 0] - r[j, 0]
            dy = q[i, 1] - r[j, 1]
            dz = q[i, 2] - r[j, 2]
            d2buf[j] = dx * dx + dy * dy + dz * dz
            used[j] = 0
        # selection keeps ordering stable: strict < keeps the lowest index on ties
        for t in range(k):
            best = -1
            bd = 1e300
            for j in range(m):
                if not used[j] and d2buf[j] < bd:
                    bd = d2buf[j]
                    best = j
            used[best] = 1
            idx[i, t] = best
            dist[i, t] = sqrt(bd)
    return idx, dist


def fps(points, Py_ssize_t k, Py_ssize_t seed_index=0):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} points")
    if not 0 <= seed_index < n:
        raise ValueError(f"seed_index={seed_index} out of range")
    cdef cnp.ndarray[cnp.int64_t, ndim=1] chosen = np.empty(k, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] min_d2 = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t i, j, cur, nxt
    cdef double dx, dy, dz, d2, bd
    chosen[0] = seed_index
    cur = seed_index
    for j in range(n):
        dx = p[j, 0] - p[cur, 0]
        dy = p[j, 1] - p[cur, 1]
        dz = p[j, 2] - p[cur, 2]
        min_d2[j] = dx * dx + dy * dy + dz * dz
    for i in range(1, k):
        nxt = 0
        bd = -1.0
        for j in range(n):
            if min_d2[j] > bd:
                bd = min_d2[j]
                nxt = j
        chosen[i] = nxt
        for j in range(n):
            dx = p[j, 0] - p[nxt, 0]
            dy = p[j, 1] - p[nxt, 1]
            dz = p[j, 2] - p[nxt, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < min_d2[j]:
                min_d2[j] = d2
    return chosen


def zbuffer(points_cam, double fx, double fy, double cx, double cy,
            Py_ssize_t width, Py_ssize_t height):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] p = np.ascontiguousarray(points_cam, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=2] winner = np.full((height, width), -1, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] best_z = np.full((height, width), 1e300, dtype=np.float64)
    cdef Py_ssize_t i, u, v
    cdef double z
    for i in range(n):
        z = p[i, 2]
        if z <= 0.0:
            continue
        u = <Py_ssize_t>floor(fx * p[i, 0] / z + cx)
        v = <Py_ssize_t>floor(fy * p[i, 1] / z + cy)
        if u < 0 or u >= width or v < 0 or v >= height:
            continue
        if z < best_z[v, u]:
            best_z[v, u] = z
            winner[v, u] = i
    return winner
