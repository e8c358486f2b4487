"""Maximum-likelihood parameter generation.

Recovers the static trajectory ``c`` maximizing the Gaussian likelihood of
``W c`` where ``W`` stacks static, delta and delta-delta windows. The normal
equations ``(W' P W) c = W' P mu`` are banded (half-width 2 for 3-tap
windows) and solved by banded Cholesky in :mod:`a2a.kernels`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, NumericError
from .mdn import MdnParams

UNINFORMATIVE_VARIANCE = 1e12


@dataclass(frozen=True)
class DeltaWindows:
    static: tuple = (1.0,)
    delta: tuple = (-0.5, 0.0, 0.5)
    accel: tuple = (1.0, -2.0, 1.0)

    def __post_init__(self):
        for w in (self.static, self.delta, self.accel):
            if len(w) % 2 != 1:
                raise ConfigError("window lengths must be odd")
        if tuple(self.static) != (1.0,):
            raise ConfigError("static window must be the unit impulse")

    @property
    def half_width(self) -> int:
        return max(len(w) for w in (self.static, self.delta, self.accel)) // 2

    def as_array(self) -> np.ndarray:
        """Centred (3, 2h + 1) coefficient matrix, zero padded."""
        h = self.half_width
        out = np.zeros((3, 2 * h + 1))
        for s, w in enumerate((self.static, self.delta, self.accel)):
            k = len(w) // 2
            out[s, h - k:h + k + 1] = w
        return out


def apply_windows(x: np.ndarray, win: DeltaWindows = DeltaWindows()) -> list[np.ndarray]:
    """Static, delta and delta-delta streams of x (T, D), replicate edges."""
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[0]
    coef = win.as_array()
    h = win.half_width
    idx = np.clip(np.arange(T)[:, None] + np.arange(-h, h + 1)[None, :], 0, T - 1)
    stacked = x[idx]  # (T, 2h+1, D)
    return [np.einsum("k,tkd->td", c, stacked) for c in coef]


def build_window_matrix(T: int, win: DeltaWindows = DeltaWindows()) -> np.ndarray:
    """Dense (3T, T) matrix; rows 3t..3t+2 give (static, delta, accel) of frame t."""
    if T < 1:
        raise ConfigError("T must be >= 1")
    coef = win.as_array()
    h = win.half_width
    W = np.zeros((3 * T, T))
    for t in range(T):
        for s in range(3):
            for k in range(2 * h + 1):
                W[3 * t + s, min(max(t + k - h, 0), T - 1)] += coef[s, k]
    return W


@dataclass
class MlpgProblem:
    """Stream means and variances, each (T, 3) or batched (D, T, 3)."""

    means: np.ndarray
    variances: np.ndarray
    variance_floor: float = 1e-6

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        if self.means.shape != self.variances.shape or self.means.shape[-1] != 3 or self.means.shape[-2] < 1:
            raise ConfigError(f"MLPG means/variances must be (..., T, 3), got {self.means.shape}")
        if not (np.all(np.isfinite(self.means)) and np.all(np.isfinite(self.variances))):
            raise NumericError("MLPG inputs must be finite")
        if np.any(self.variances < self.variance_floor):
            raise NumericError(f"MLPG variances below floor {self.variance_floor}")


def _band_matvec(ab: np.ndarray, x: np.ndarray) -> np.ndarray:
    y = ab[0] * x
    for k in range(1, ab.shape[0]):
        y[k:] += ab[k, :-k] * x[:-k]
        y[:-k] += ab[k, :-k] * x[k:]
    return y


def mlpg_solve(prob: MlpgProblem, win: DeltaWindows = DeltaWindows(), check: bool = True) -> np.ndarray:
    """Solve one (T, 3) problem or a (D, T, 3) batch; returns (T,) or (D, T)."""
    mu, var = prob.means, prob.variances
    single = mu.ndim == 2
    if single:
        mu, var = mu[None], var[None]
    prec = 1.0 / var
    coef = win.as_array()
    c, ok = kernels.mlpg_solve_batch(mu, prec, coef)
    if not ok:
        raise NumericError("MLPG normal equations are not positive definite")
    if check:
        for d in range(mu.shape[0]):
            ab, rhs = kernels.mlpg_normal_band(mu[d], prec[d], coef)
            resid = np.max(np.abs(_band_matvec(ab, c[d]) - rhs))
            if resid > 1e-8 * (1.0 + np.max(np.abs(rhs))):
                raise NumericError(f"MLPG residual {resid:.3e} exceeds tolerance (dim {d})")
    return c[0] if single else c


def smooth_mdn_sequence(p: MdnParams, win: DeltaWindows = DeltaWindows(), n_static: int = 18,
                        variance_source: str = "predicted", variance_floor: float = 1e-6) -> np.ndarray:
    """MLPG over the max-weight component of each frame; returns (T, n_static).

    ``variance_source="pooled"`` replaces per-frame variances by their
    per-dimension average over the utterance.
    """
    if p.dim != 3 * n_static:
        raise ConfigError(f"MDN target dim {p.dim} != 3 x {n_static} (static + delta + accel)")
    T = p.means.shape[0]
    best = np.argmax(p.weights, axis=1)
    rows = np.arange(T)
    mu = p.means[rows, best]
    var = p.variances[rows, best]
    if variance_source == "pooled":
        var = np.broadcast_to(var.mean(axis=0), var.shape)
    elif variance_source != "predicted":
        raise ConfigError(f"unknown variance source {variance_source!r}")
    # (T, 3*n) -> (n, T, 3)
    mu3 = mu.reshape(T, 3, n_static).transpose(2, 0, 1)
    var3 = var.reshape(T, 3, n_static).transpose(2, 0, 1)
    prob = MlpgProblem(mu3, np.maximum(var3, variance_floor), variance_floor)
    return mlpg_solve(prob, win).T
