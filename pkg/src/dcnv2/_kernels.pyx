# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Semantics mirror ``dcnv2._fallback`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, copysign

cnp.import_array()


def jacobi_singular_values(a, double tol=1e-12, int max_sweeps=60):
    # column-major copy so each column is contiguous
    cdef double[::1, :] g = np.array(a, dtype=np.float64, order="F", copy=True)
    cdef Py_ssize_t m = g.shape[0], n = g.shape[1]
    cdef Py_ssize_t p, q, i
    cdef int sweep
    cdef bint rotated
    cdef double alpha, beta, gamma, zeta, t, c, s, gp, gq
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    alpha += g[i, p] * g[i, p]
                    beta += g[i, q] * g[i, q]
                    gamma += g[i, p] * g[i, q]
                if gamma == 0.0 or fabs(gamma) <= tol * sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = copysign(1.0, zeta) / (fabs(zeta) + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    gp = g[i, p]
                    gq = g[i, q]
                    g[i, p] = c * gp - s * gq
                    g[i, q] = s * gp + c * gq
        if not rotated:
            break
    out = np.empty(n)
    cdef double[::1] o = out
    cdef double acc
    for p in range(n):
        acc = 0.0
        for i in range(m):
            acc += g[i, p] * g[i, p]
        o[p] = sqrt(acc)
    return out


def matvec(const double[:, :] a, const double[:] x):
    cdef Py_ssize_t rows = a.shape[0], cols = a.shape[1], i, j
    out = np.zeros(rows)
    cdef double[::1] o = out
    cdef double acc
    for i in range(rows):
        acc = 0.0
        for j in range(cols):
            acc += a[i, j] * x[j]
        o[i] = acc
    return out
