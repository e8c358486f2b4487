"""Mixture density head and the multi-task training losses.

Raw head layout per frame (width ``M * (2D + 1)``)::

    [ y_lambda (M) | y_mu (M*D, component-major) | y_sigma (M*D) ]

Weights are ``softmax(y_lambda)``, means are ``y_mu`` and standard
deviations ``exp(y_sigma)``, so variances are ``exp(2 y_sigma)`` floored at
``variance_floor``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DegenerateInputError, InternalError

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class MdnConfig:
    n_mix: int = 2
    target_dim: int = 54
    variance_floor: float = 1e-6

    def __post_init__(self):
        if self.n_mix < 1 or self.target_dim < 1:
            raise ConfigError("n_mix and target_dim must be >= 1")
        if self.variance_floor <= 0:
            raise ConfigError("variance_floor must be positive")

    @property
    def raw_width(self) -> int:
        return self.n_mix * (2 * self.target_dim + 1)


@dataclass
class MdnParams:
    weights: np.ndarray    # (T, M)
    means: np.ndarray      # (T, M, D)
    variances: np.ndarray  # (T, M, D)
    log_weights: np.ndarray | None = None

    def __post_init__(self):
        if self.log_weights is None:
            self.log_weights = np.log(self.weights)

    @property
    def n_mix(self) -> int:
        return self.weights.shape[1]

    @property
    def dim(self) -> int:
        return self.means.shape[2]


@dataclass(frozen=True)
class MtlWeights:
    mdn: float = 0.25
    mse: float = 0.25
    pearson: float = 0.25
    ce: float = 0.25

    def __post_init__(self):
        for name in ("mdn", "mse", "pearson", "ce"):
            if getattr(self, name) < 0:
                raise ConfigError(f"MTL weight {name} must be >= 0")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.mdn, self.mse, self.pearson, self.ce)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def _split_raw(raw: np.ndarray, cfg: MdnConfig):
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != cfg.raw_width:
        raise ConfigError(f"MDN raw output width {raw.shape[-1]} != M(2D+1) = {cfg.raw_width}")
    M, D = cfg.n_mix, cfg.target_dim
    T = raw.shape[0]
    y_lam = raw[:, :M]
    y_mu = raw[:, M:M + M * D].reshape(T, M, D)
    y_sig = raw[:, M + M * D:].reshape(T, M, D)
    return y_lam, y_mu, y_sig


def mdn_split(raw: np.ndarray, cfg: MdnConfig) -> MdnParams:
    y_lam, y_mu, y_sig = _split_raw(raw, cfg)
    log_w = log_softmax(y_lam, axis=1)
    var = np.maximum(np.exp(2.0 * y_sig), cfg.variance_floor)
    return MdnParams(np.exp(log_w), y_mu.copy(), var, log_w)


def _component_loglik(p: MdnParams, a: np.ndarray) -> np.ndarray:
    """log w_m + log N(a_t; mu_tm, diag var_tm), shape (T, M)."""
    if np.any(p.variances <= 0):
        raise InternalError("MDN variances must be strictly positive")
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (p.means.shape[0], p.dim):
        raise DataError(f"target shape {a.shape} does not match MDN params {(p.means.shape[0], p.dim)}")
    diff = a[:, None, :] - p.means
    log_n = -0.5 * np.sum(LOG_2PI + np.log(p.variances) + diff * diff / p.variances, axis=2)
    return p.log_weights + log_n


def mdn_nll(p: MdnParams, a: np.ndarray) -> tuple[float, np.ndarray]:
    """Negative log-likelihood summed over frames, and per-frame values."""
    per_frame = -logsumexp(_component_loglik(p, a), axis=1)
    return float(per_frame.sum()), per_frame


def mdn_nll_grad(p: MdnParams, a: np.ndarray, cfg: MdnConfig) -> np.ndarray:
    """Gradient of the summed NLL w.r.t. the raw head outputs, (T, M(2D+1))."""
    lp = _component_loglik(p, a)
    gamma = np.exp(lp - logsumexp(lp, axis=1)[:, None])
    diff = np.asarray(a, dtype=np.float64)[:, None, :] - p.means
    g_lam = p.weights - gamma
    g_mu = -gamma[:, :, None] * diff / p.variances
    g_sig = gamma[:, :, None] * (1.0 - diff * diff / p.variances)
    # floored variances no longer depend on y_sigma
    g_sig = np.where(p.variances > cfg.variance_floor, g_sig, 0.0)
    T = a.shape[0]
    return np.concatenate([g_lam, g_mu.reshape(T, -1), g_sig.reshape(T, -1)], axis=1)


def mdn_point_estimate(p: MdnParams, mode: str = "mixture_mean") -> np.ndarray:
    if mode == "mixture_mean":
        return np.einsum("tm,tmd->td", p.weights, p.means)
    if mode == "max_component":
        best = np.argmax(p.weights, axis=1)
        return p.means[np.arange(p.means.shape[0]), best]
    raise ConfigError(f"unknown point-estimate mode {mode!r}")


def mixture_mean_backward(p: MdnParams, grad_mean: np.ndarray) -> np.ndarray:
    """Chain a gradient on the mixture mean back to the raw head outputs."""
    mean = mdn_point_estimate(p, "mixture_mean")
    T = grad_mean.shape[0]
    # d mean_d / d y_lambda_k = w_k (mu_kd - mean_d)
    g_lam = p.weights * np.einsum("td,tkd->tk", grad_mean, p.means - mean[:, None, :])
    g_mu = p.weights[:, :, None] * grad_mean[:, None, :]
    g_sig = np.zeros_like(p.means)
    return np.concatenate([g_lam, g_mu.reshape(T, -1), g_sig.reshape(T, -1)], axis=1)


def _check_pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2:
        raise DataError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    return pred, target


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    pred, target = _check_pair(pred, target)
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def pearson_loss(pred: np.ndarray, target: np.ndarray, eps: float = 1e-8) -> tuple[float, np.ndarray]:
    """Negative Pearson correlation averaged over columns."""
    pred, target = _check_pair(pred, target)
    T, D = pred.shape
    if T < 2:
        raise DegenerateInputError("Pearson loss needs at least 2 frames")
    xc = pred - pred.mean(axis=0)
    yc = target - target.mean(axis=0)
    sx = np.maximum(np.sqrt(np.sum(xc * xc, axis=0)), eps)
    sy = np.maximum(np.sqrt(np.sum(yc * yc, axis=0)), eps)
    sxy = np.sum(xc * yc, axis=0)
    r = sxy / (sx * sy)
    # d r / d x_t = yc_t / (sx sy) - r xc_t / sx^2 (centering terms cancel)
    dr = yc / (sx * sy) - np.where(sx > eps, r / (sx * sx), 0.0) * xc
    return float(-np.mean(r)), -dr / D


def ce_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    T, K = logits.shape
    if labels.shape != (T,):
        raise DataError(f"expected {T} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise DataError(f"labels must lie in [0, {K})")
    logp = log_softmax(logits, axis=1)
    rows = np.arange(T)
    loss = -float(np.mean(logp[rows, labels]))
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad / T


def mtl_loss(components, w: MtlWeights = MtlWeights(), grads=None):
    """Blend (L_mdn, L_mse, L_pearson, L_ce) and optionally their gradients.

    ``grads`` is a sequence of four arrays (or None entries) of one shape;
    the blended gradient uses the same weights.
    """
    if not isinstance(w, MtlWeights):
        w = MtlWeights(*w)
    ws = w.as_tuple()
    total = float(sum(wi * ci for wi, ci in zip(ws, components)))
    if grads is None:
        return total
    blended = None
    for wi, g in zip(ws, grads):
        if g is None or wi == 0:
            continue
        blended = wi * g if blended is None else blended + wi * g
    return total, blended


def inversion_objective(raw: np.ndarray, target: np.ndarray, cfg: MdnConfig,
                        weights: MtlWeights = MtlWeights(), logits=None, labels=None,
                        bounds=None):
    """Multi-task objective for one batch of utterances.

    The MDN term is the per-frame mean NLL; MSE and Pearson use the
    mixture-mean point estimate; Pearson is computed per utterance segment
    given by ``bounds`` (list of (start, stop)) and averaged. Returns
    ``(loss, parts, grad_raw, grad_logits)``.
    """
    T = raw.shape[0]
    bounds = bounds or [(0, T)]
    p = mdn_split(raw, cfg)
    nll, _ = mdn_nll(p, target)
    l_mdn = nll / T
    g_mdn = mdn_nll_grad(p, target, cfg) / T
    mean = mdn_point_estimate(p, "mixture_mean")
    l_mse, g_mse_mean = mse_loss(mean, target)
    g_pear_mean = np.zeros_like(mean)
    l_pear = 0.0
    if weights.pearson > 0:
        for s, e in bounds:
            lp, gp = pearson_loss(mean[s:e], target[s:e])
            l_pear += lp / len(bounds)
            g_pear_mean[s:e] = gp / len(bounds)
    g_mean = weights.mse * g_mse_mean + weights.pearson * g_pear_mean
    g_raw = weights.mdn * g_mdn + mixture_mean_backward(p, g_mean)
    l_ce, g_logits = 0.0, None
    if logits is not None and labels is not None:
        l_ce, g_ce = ce_loss(logits, labels)
        g_logits = weights.ce * g_ce
    parts = {"mdn": l_mdn, "mse": l_mse, "pearson": l_pear, "ce": l_ce}
    total = mtl_loss((l_mdn, l_mse, l_pear, l_ce), weights)
    return total, parts, g_raw, g_logits
