# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Must match ``_kernels_py`` bitwise (except the SVD)."""

import numpy as np
from libc.math cimport sqrt, sqrtf, fabs, hypot

BACKEND = "cython"


def scatter_add(float[::1] flat, long long[::1] idx, float[::1] vals, int sign):
    cdef Py_ssize_t i, n = idx.shape[0]
    if sign > 0:
        for i in range(n):
            flat[idx[i]] = flat[idx[i]] + vals[i]
    else:
        for i in range(n):
            flat[idx[i]] = flat[idx[i]] - vals[i]


def scatter_set(float[::1] flat, long long[::1] idx, float[::1] vals):
    cdef Py_ssize_t i, n = idx.shape[0]
    for i in range(n):
        flat[idx[i]] = vals[i]


def gather(float[::1] flat, long long[::1] idx):
    cdef Py_ssize_t i, n = idx.shape[0]
    out = np.empty(n, dtype=np.float32)
    cdef float[::1] o = out
    for i in range(n):
        o[i] = flat[idx[i]]
    return out


def adam_update(float[::1] p, float[::1] g, float[::1] m, float[::1] v,
                float lr, float beta1, float beta2, float omb1, float omb2,
                float bc1, float bc2, float eps, float decay):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef float gi, mi, vi, mhat, vhat, pi
    cdef bint use_decay = decay != 1.0
    for i in range(n):
        gi = g[i]
        pi = p[i]
        if use_decay:
            pi = pi * decay
        mi = m[i] * beta1
        mi = mi + omb1 * gi
        vi = v[i] * beta2
        vi = vi + omb2 * (gi * gi)
        m[i] = mi
        v[i] = vi
        mhat = mi / bc1
        vhat = vi / bc2
        p[i] = pi - (lr * mhat) / (sqrtf(vhat) + eps)


def jacobi_singular_values(a, double tol=1e-15, int max_sweeps=80):
    """Singular values of a 2-D array by cyclic one-sided Jacobi, descending."""
    arr = np.array(a, dtype=np.float64, copy=True)
    if arr.shape[0] < arr.shape[1]:
        arr = arr.T
    # column-major so each column is contiguous
    cdef double[::1, :] A = np.asfortranarray(arr)
    cdef Py_ssize_t rows = A.shape[0], n = A.shape[1]
    cdef Py_ssize_t i, p, q, sweep
    cdef double alpha, beta, gamma, zeta, t, c, s, x, y
    cdef bint rotated
    if n == 0:
        return np.zeros(0)
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(rows):
                    alpha += A[i, p] * A[i, p]
                    beta += A[i, q] * A[i, q]
                    gamma += A[i, p] * A[i, q]
                if gamma == 0.0 or fabs(gamma) <= tol * sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0:
                    t = 1.0 / (fabs(zeta) + hypot(1.0, zeta))
                else:
                    t = -1.0 / (fabs(zeta) + hypot(1.0, zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for i in range(rows):
                    x = A[i, p]
                    y = A[i, q]
                    A[i, p] = c * x - s * y
                    A[i, q] = s * x + c * y
        if not rotated:
            break
    out = np.empty(n)
    for p in range(n):
        alpha = 0.0
        for i in range(rows):
            alpha += A[i, p] * A[i, p]
        out[p] = sqrt(alpha)
    return np.sort(out)[::-1]
