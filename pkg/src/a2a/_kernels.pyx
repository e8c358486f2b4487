# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled MLPG kernels; same API as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


cdef bint _chol_inplace(double[:, ::1] L, Py_ssize_t p, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, j, k, k0
    cdef double s, d
    for j in range(n):
        s = L[0, j]
        k0 = j - p if j > p else 0
        for k in range(k0, j):
            s -= L[j - k, k] * L[j - k, k]
        if not s > 0.0:
            return False
        d = sqrt(s)
        L[0, j] = d
        for i in range(j + 1, (j + p if j + p < n - 1 else n - 1) + 1):
            s = L[i - j, j]
            k0 = i - p if i > p else 0
            for k in range(k0, j):
                s -= L[i - k, k] * L[j - k, k]
            L[i - j, j] = s / d
    return True


cdef void _chol_subst(double[:, ::1] L, Py_ssize_t p, Py_ssize_t n, double[:, ::1] y) noexcept nogil:
    cdef Py_ssize_t i, k, c, k0, k1, m = y.shape[1]
    cdef double v
    for i in range(n):
        k0 = i - p if i > p else 0
        for k in range(k0, i):
            v = L[i - k, k]
            for c in range(m):
                y[i, c] -= v * y[k, c]
        for c in range(m):
            y[i, c] /= L[0, i]
    for i in range(n - 1, -1, -1):
        k1 = i + p if i + p < n - 1 else n - 1
        for k in range(i + 1, k1 + 1):
            v = L[k - i, i]
            for c in range(m):
                y[i, c] -= v * y[k, c]
        for c in range(m):
            y[i, c] /= L[0, i]


def band_cholesky_solve(ab, rhs):
    cdef double[:, ::1] L = np.array(ab, dtype=np.float64, order="C", copy=True)
    cdef Py_ssize_t p = L.shape[0] - 1, n = L.shape[1]
    b = np.array(rhs, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] y = b.reshape(n, -1)
    cdef bint ok
    with nogil:
        ok = _chol_inplace(L, p, n)
        if ok:
            _chol_subst(L, p, n, y)
    if not ok:
        return None, False
    return b, True


cdef void _assemble(double[:, ::1] mu, double[:, ::1] prec, double[:, ::1] win,
                    double[:, ::1] ab, double[:, ::1] rhs) noexcept nogil:
    cdef Py_ssize_t T = mu.shape[0], S = mu.shape[1], W = win.shape[1]
    cdef Py_ssize_t h = (W - 1) // 2
    cdef Py_ssize_t t, s, k, c, a, b, lo, hi, span
    cdef double row[64]
    cdef double ps, ms, ra, rb
    for t in range(T):
        lo = t - h if t > h else 0
        hi = t + h if t + h < T - 1 else T - 1
        span = hi - lo + 1
        for s in range(S):
            for a in range(span):
                row[a] = 0.0
            for k in range(W):
                c = t + k - h
                if c < 0:
                    c = 0
                elif c > T - 1:
                    c = T - 1
                row[c - lo] += win[s, k]
            ps = prec[t, s]
            ms = mu[t, s] * ps
            for a in range(span):
                ra = row[a]
                if ra == 0.0:
                    continue
                rhs[lo + a, 0] += ms * ra
                for b in range(a + 1):
                    rb = row[b]
                    if rb != 0.0:
                        ab[a - b, lo + b] += ps * ra * rb


def mlpg_normal_band(mu, prec, windows):
    cdef double[:, ::1] m = np.ascontiguousarray(mu, dtype=np.float64)
    cdef double[:, ::1] p = np.ascontiguousarray(prec, dtype=np.float64)
    cdef double[:, ::1] w = np.ascontiguousarray(windows, dtype=np.float64)
    if w.shape[1] > 63:
        raise ValueError("window too wide")
    cdef Py_ssize_t T = m.shape[0], h = (w.shape[1] - 1) // 2
    ab = np.zeros((2 * h + 1, T))
    rhs = np.zeros((T, 1))
    cdef double[:, ::1] abv = ab
    cdef double[:, ::1] rv = rhs
    with nogil:
        _assemble(m, p, w, abv, rv)
    return ab, rhs[:, 0]


def mlpg_solve_batch(mu, prec, windows):
    cdef double[:, :, ::1] m = np.ascontiguousarray(mu, dtype=np.float64)
    cdef double[:, :, ::1] p = np.ascontiguousarray(prec, dtype=np.float64)
    cdef double[:, ::1] w = np.ascontiguousarray(windows, dtype=np.float64)
    if w.shape[1] > 63:
        raise ValueError("window too wide")
    cdef Py_ssize_t D = m.shape[0], T = m.shape[1], h = (w.shape[1] - 1) // 2
    cdef Py_ssize_t d, i, j
    cdef bint ok = True
    out = np.empty((D, T))
    cdef double[:, ::1] o = out
    cdef double[:, ::1] ab = np.empty((2 * h + 1, T))
    cdef double[:, ::1] rhs = np.empty((T, 1))
    with nogil:
        for d in range(D):
            for i in range(2 * h + 1):
                for j in range(T):
                    ab[i, j] = 0.0
            for j in range(T):
                rhs[j, 0] = 0.0
            _assemble(m[d], p[d], w, ab, rhs)
            if not _chol_inplace(ab, 2 * h, T):
                ok = False
                break
            _chol_subst(ab, 2 * h, T, rhs)
            for j in range(T):
                o[d, j] = rhs[j, 0]
    if not ok:
        return None, False
    return out, True
