"""Pure-Python reference kernels.

Mirror the compiled ``_kernels`` extension function for function; used when
the extension is not built or ``A2A_PURE_PYTHON=1``.
"""

import math

import numpy as np


def band_cholesky_solve(ab, rhs):
    """Solve A x = rhs for symmetric positive definite banded A.

    ``ab`` holds the lower band, ``ab[k, j] = A[j + k, j]``; ``rhs`` may be
    1-D (n,) or 2-D (n, m). Returns (x, ok) where ok is False when A is
    not positive definite.
    """
    ab = np.asarray(ab, dtype=np.float64)
    p1, n = ab.shape
    p = p1 - 1
    L = [[0.0] * n for _ in range(p1)]
    for j in range(n):
        s = ab[0, j]
        for k in range(max(0, j - p), j):
            v = L[j - k][k]
            s -= v * v
        if not s > 0.0:
            return None, False
        d = math.sqrt(s)
        L[0][j] = d
        for i in range(j + 1, min(j + p, n - 1) + 1):
            s = ab[i - j, j]
            for k in range(max(0, i - p), j):
                s -= L[i - k][k] * L[j - k][k]
            L[i - j][j] = s / d
    b = np.array(rhs, dtype=np.float64, copy=True)
    y = b.reshape(n, -1)
    for i in range(n):
        for k in range(max(0, i - p), i):
            y[i] -= L[i - k][k] * y[k]
        y[i] /= L[0][i]
    for i in range(n - 1, -1, -1):
        for k in range(i + 1, min(i + p, n - 1) + 1):
            y[i] -= L[k - i][i] * y[k]
        y[i] /= L[0][i]
    return b, True


def mlpg_normal_band(mu, prec, windows):
    """Assemble the banded normal equations of one MLPG problem.

    mu, prec: (T, S) stream means and precisions. windows: (S, 2h + 1)
    centred coefficients. Edge frames are replicated. Returns (ab, rhs)
    with ``ab`` of shape (2h + 1, T).
    """
    mu = np.asarray(mu, dtype=np.float64)
    prec = np.asarray(prec, dtype=np.float64)
    windows = np.asarray(windows, dtype=np.float64)
    T, S = mu.shape
    h = (windows.shape[1] - 1) // 2
    bw = 2 * h
    ab = np.zeros((bw + 1, T))
    rhs = np.zeros(T)
    for t in range(T):
        lo = max(0, t - h)
        hi = min(T - 1, t + h)
        for s in range(S):
            row = [0.0] * (hi - lo + 1)
            for k in range(2 * h + 1):
                c = t + k - h
                c = 0 if c < 0 else (T - 1 if c > T - 1 else c)
                row[c - lo] += windows[s, k]
            ps = prec[t, s]
            ms = mu[t, s] * ps
            for a in range(hi - lo + 1):
                ra = row[a]
                if ra == 0.0:
                    continue
                rhs[lo + a] += ms * ra
                for b in range(a + 1):
                    rb = row[b]
                    if rb != 0.0:
                        ab[a - b, lo + b] += ps * ra * rb
    return ab, rhs


def mlpg_solve_batch(mu, prec, windows):
    """Solve D independent MLPG problems; mu, prec are (D, T, S).

    Returns (c, ok) with c of shape (D, T).
    """
    mu = np.asarray(mu, dtype=np.float64)
    D, T, _ = mu.shape
    out = np.empty((D, T))
    for d in range(D):
        ab, rhs = mlpg_normal_band(mu[d], prec[d], windows)
        x, ok = band_cholesky_solve(ab, rhs)
        if not ok:
            return None, False
        out[d] = x
    return out, True
