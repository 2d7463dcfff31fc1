"""Temporal normalization: per-coordinate detrend and standardize.

Two operating modes share one contract:

* chunk mode — closed-form least-squares line fit over the whole segment,
  then residual standardization; runs in parallel over coordinates.
* flow mode  — recursive moving averages for trend and residual power, so a
  stream can be normalized one frame at a time with constant memory.

Time indices run t = 1..T.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_ALPHA = 0.95
DEFAULT_EPS = 1e-6


@dataclass(frozen=True)
class TrendFit:
    """Least-squares line x_t ~ beta0 * t + beta1."""

    beta0: float
    beta1: float


@dataclass
class TNState:
    """Running trend/variance for one stream; updated in place per frame."""

    mu: np.ndarray
    var: np.ndarray
    alpha: float
    eps: float
    warm: int = 0

    def nbytes(self) -> int:
        return self.mu.nbytes + self.var.nbytes


def _trend_coeffs(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized normal equations over axis 0 with t = 1..T."""
    t = x.shape[0]
    idx = np.arange(1, t + 1, dtype=np.float64)
    s_t = idx.sum()
    s_tt = (idx * idx).sum()
    denom = t * s_tt - s_t * s_t
    s_x = x.sum(axis=0)
    s_tx = np.tensordot(idx, x, axes=(0, 0))
    beta0 = (t * s_tx - s_t * s_x) / denom
    beta1 = (s_x - beta0 * s_t) / t
    return beta0, beta1


def fit_linear_trend(x: np.ndarray) -> TrendFit:
    """Fit the least-squares linear trend of a 1-D series."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("fit_linear_trend expects a 1-D series")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples to fit a trend")
    if not np.isfinite(x).all():
        raise ValueError("series contains non-finite values")
    beta0, beta1 = _trend_coeffs(x)
    return TrendFit(beta0=float(beta0), beta1=float(beta1))


def tn_chunk(x: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Detrend and standardize a (T,) or (T, D) chunk per coordinate.

    Residuals are divided by sqrt(mean r^2) + eps, so exactly-linear
    coordinates map to zeros instead of dividing by zero.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("tn_chunk expects (T,) or (T, D)")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 frames")
    beta0, beta1 = _trend_coeffs(x)
    idx = np.arange(1, x.shape[0] + 1, dtype=np.float64)[:, None]
    r = x - (beta0[None, :] * idx + beta1[None, :])
    sigma = np.sqrt(np.mean(r * r, axis=0))
    out = r / (sigma + eps)[None, :]
    return out[:, 0] if squeeze else out


def tn_flow_init(alpha: float, eps: float, x_1: np.ndarray) -> TNState:
    """Start a stream on its first frame: trend = x_1, variance = 0."""
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha={alpha} outside (0, 1)")
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    x_1 = np.atleast_1d(np.asarray(x_1, dtype=np.float64))
    return TNState(
        mu=x_1.copy(), var=np.zeros_like(x_1), alpha=alpha, eps=eps, warm=0
    )


def tn_flow_step(state: TNState, x_t: np.ndarray) -> tuple[TNState, np.ndarray]:
    """Advance the recursive moving averages by one frame.

    mu    <- alpha * mu + (1 - alpha) * x
    r      = x - mu
    var   <- alpha * var + (1 - alpha) * r^2
    output = r / (sqrt(var) + eps)

    The state arrays are updated in place; no per-history storage exists.
    """
    x_t = np.atleast_1d(np.asarray(x_t, dtype=np.float64))
    a = state.alpha
    state.mu *= a
    state.mu += (1.0 - a) * x_t
    r = x_t - state.mu
    state.var *= a
    state.var += (1.0 - a) * r * r
    state.warm += 1
    return state, r / (np.sqrt(state.var) + state.eps)
