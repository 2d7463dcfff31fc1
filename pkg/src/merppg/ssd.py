"""Diagonal state-space mixer with dual evaluation paths.

The same linear recurrence

    h_t = diag(abar_t) . h_{t-1} + bbar_t . x_t        y_t = C_t . h_t

is evaluated two ways: a parallel chunk form for whole segments (blocked
lower-triangular decay kernels, linear memory in T) and a constant-memory
single-step form for streaming. Both accept either time-invariant
parameters or per-step (selective) sequences, and their outputs agree to
floating-point accuracy, which is what lets a chunk-trained model run
frame by frame with a carried hidden state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import alloc

_ZOH_SERIES_CUTOFF = 1e-8
_LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class SSDParamsContinuous:
    """Continuous-time system: x' = diag(a) h + B x, y = C h, step dt."""

    a_diag: np.ndarray
    B: np.ndarray
    C: np.ndarray
    dt: float

    def __post_init__(self):
        a, b, c = self.a_diag, self.B, self.C
        if a.ndim != 1 or b.ndim != 2 or c.ndim != 2:
            raise ValueError("expected a_diag (N,), B (N,p), C (q,N)")
        n = a.shape[0]
        if b.shape[0] != n or c.shape[1] != n:
            raise ValueError("state dimension mismatch between a_diag, B, C")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if np.any(a > 0):
            raise ValueError("a_diag entries must be <= 0 for stability")
        for arr in (a, b, c):
            if not np.isfinite(arr).all():
                raise ValueError("non-finite parameter")


@dataclass(frozen=True)
class SSDParamsDiscrete:
    """Discretized system with per-state-channel decay abar in (0, 1]."""

    abar: np.ndarray
    bbar: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        a, b, c = self.abar, self.bbar, self.C
        if a.ndim != 1 or b.ndim != 2 or c.ndim != 2:
            raise ValueError("expected abar (N,), bbar (N,p), C (q,N)")
        n = a.shape[0]
        if b.shape[0] != n or c.shape[1] != n:
            raise ValueError("state dimension mismatch between abar, bbar, C")
        if np.any(a <= 0) or np.any(a > 1):
            raise ValueError("abar entries must lie in (0, 1]")
        for arr in (a, b, c):
            if not np.isfinite(arr).all():
                raise ValueError("non-finite parameter")

    @property
    def state_dim(self) -> int:
        return self.abar.shape[0]


@dataclass
class SSDState:
    """Transferable hidden state; byte size is fixed at construction.

    A single mixer unit carries shape (N,). The model's per-block mixer
    keeps one N-channel state per feature coordinate, shape (N, D).
    """

    h: np.ndarray

    def nbytes(self) -> int:
        return self.h.nbytes

    def copy(self) -> "SSDState":
        return SSDState(h=self.h.copy())


def zoh_input_coeff(a, dt):
    """ZOH input integral (exp(a dt) - 1) / a with a -> 0 handled by series."""
    a = np.asarray(a, dtype=np.float64)
    ad = a * dt
    small = np.abs(ad) < _ZOH_SERIES_CUTOFF
    safe_a = np.where(small, 1.0, a)
    exact = (np.exp(ad) - 1.0) / safe_a
    series = dt * (1.0 + ad / 2.0)
    return np.where(small, series, exact)


def discretize_zoh(p: SSDParamsContinuous) -> SSDParamsDiscrete:
    """Zero-order-hold discretization of a diagonal continuous system."""
    abar = np.exp(p.a_diag * p.dt)
    coeff = zoh_input_coeff(p.a_diag, p.dt)
    bbar = coeff[:, None] * p.B
    out = SSDParamsDiscrete(abar=abar, bbar=bbar, C=p.C.copy())
    if not (np.isfinite(out.abar).all() and np.isfinite(out.bbar).all()):
        raise ValueError("discretization produced non-finite parameters")
    return out


def build_kernel(abar, T: int) -> np.ndarray:
    """Materialize the lower-triangular decay kernel (test/small-T utility).

    abar may be a scalar or (N,) time-invariant decay (L[i, j] = abar^(i-j))
    or a (T, N) per-step sequence (L[i, j] = prod of abar over steps j+1..i;
    row 0 of the sequence is never used). Returns (T, T) for scalar input,
    else (N, T, T).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    a = np.asarray(abar, dtype=np.float64)
    scalar = a.ndim == 0
    if scalar:
        a = a[None]
    if a.ndim == 1:
        a = np.broadcast_to(a, (T, a.shape[0]))
    if a.shape != (T, a.shape[1]):
        raise ValueError("abar must be scalar, (N,), or (T, N)")
    n = a.shape[1]
    L = np.zeros((n, T, T))
    L[:, 0, 0] = 1.0
    for i in range(1, T):
        L[:, i, : i + 1] = a[i][:, None] * L[:, i - 1, : i + 1]
        L[:, i, i] = 1.0
    return L[0] if scalar else L


def decay_scan(
    log_abar: np.ndarray,
    u: np.ndarray,
    h0: np.ndarray | None = None,
    block: int = 64,
) -> np.ndarray:
    """All states of h_t = exp(log_abar_t) * h_{t-1} + u_t, block-parallel.

    Shapes: log_abar (..., T, N); u (..., T, N) or (..., T, N, W) with the
    decay broadcast over the trailing W; h0 matches u without the T axis.
    Never materializes a T x T kernel: work is O(T * block) and transient
    memory O(block^2 * N) per leading batch element.
    """
    squeeze = u.ndim == log_abar.ndim
    if squeeze:
        u = u[..., None]
    if u.ndim != log_abar.ndim + 1:
        raise ValueError("u must be (..., T, N) or (..., T, N, W)")
    t_len = u.shape[-3]
    if log_abar.shape[-2] != t_len:
        raise ValueError("log_abar and u disagree on T")
    if h0 is None:
        h = np.zeros(u.shape[:-3] + u.shape[-2:], dtype=u.dtype)
    else:
        h = h0[..., None] if squeeze else h0
        h = np.broadcast_to(h, u.shape[:-3] + u.shape[-2:]).astype(u.dtype)

    la = log_abar.astype(u.dtype)
    out = alloc.empty(u.shape, dtype=u.dtype)
    for s in range(0, t_len, block):
        e = min(t_len, s + block)
        q = e - s
        lc = np.cumsum(la[..., s:e, :], axis=-2)
        mask = np.tril(np.ones((q, q), dtype=bool))
        diff = lc[..., :, None, :] - lc[..., None, :, :]
        kernel = alloc.tracked(
            np.exp(np.where(mask[..., :, :, None], diff, -np.inf))
        )
        intra = np.einsum("...ikn,...knw->...inw", kernel, u[..., s:e, :, :])
        out[..., s:e, :, :] = intra + np.exp(lc)[..., None] * h[..., None, :, :]
        h = out[..., e - 1, :, :]
        alloc.release(kernel)
    return out[..., 0] if squeeze else out


def _as_steps(p, t_len: int):
    """Normalize LTI params or per-step sequences to (T, ...) arrays."""
    if isinstance(p, SSDParamsDiscrete):
        abar, bbar, c = p.abar, p.bbar, p.C
    else:
        abar, bbar, c = p
        abar, bbar, c = (np.asarray(x) for x in (abar, bbar, c))
    if abar.ndim == 1:
        abar = np.broadcast_to(abar, (t_len,) + abar.shape)
    if bbar.ndim == 2:
        bbar = np.broadcast_to(bbar, (t_len,) + bbar.shape)
    if c.ndim == 2:
        c = np.broadcast_to(c, (t_len,) + c.shape)
    if abar.shape[0] != t_len or bbar.shape[0] != t_len or c.shape[0] != t_len:
        raise ValueError("per-step parameter sequences must have length T")
    return abar, bbar, c


def _unwrap(h0) -> np.ndarray | None:
    return h0.h if isinstance(h0, SSDState) else h0


def ssd_chunk(
    p,
    X: np.ndarray,
    h0: np.ndarray | SSDState | None = None,
    block: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """Run a whole (T, p) segment through the mixer in parallel chunk form.

    `p` is an SSDParamsDiscrete or a tuple (abar, bbar, C), each entry
    either time-invariant or a (T, ...) per-step sequence. Returns the
    (T, q) output and the final hidden state, which can seed the next
    segment or the step form. Matches iterating :func:`ssd_step` to
    floating-point accuracy.
    """
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValueError("X must be (T, p)")
    t_len = X.shape[0]
    abar, bbar, c = _as_steps(p, t_len)
    if bbar.shape[2] != X.shape[1]:
        raise ValueError(f"input dim {X.shape[1]} does not match bbar {bbar.shape}")
    if np.any(abar < 0):
        raise ValueError("abar entries must be non-negative")
    u = np.einsum("tnp,tp->tn", bbar, X)
    la = np.log(np.maximum(abar, _LOG_FLOOR))
    H = decay_scan(la, u, _unwrap(h0), block=block)
    Y = np.einsum("tqn,tn->tq", c, H)
    return Y, H[-1].copy()


def ssd_step(
    p: SSDParamsDiscrete, h: np.ndarray | SSDState, x_t: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One recurrence step: O(Np + qN) work, no history.

    Returns (h_new, y_t). Accepts a bare (N,) state or an SSDState.
    """
    hv = _unwrap(h)
    h_new = p.abar * hv + p.bbar @ x_t
    y = p.C @ h_new
    return h_new, y


def softplus(x):
    """Numerically stable log(1 + exp(x))."""
    x = np.asarray(x)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


@dataclass(frozen=True)
class SelectiveProjection:
    """Per-timestep parameter maps: features -> (dt, B, C).

    dt is strictly positive via softplus; B and C are linear in the input.
    With zero weight matrices the projections are constant and the mixer
    degenerates to a time-invariant system.
    """

    w_dt: np.ndarray  # (D, n_dt)
    b_dt: np.ndarray  # (n_dt,)
    w_b: np.ndarray   # (D, N)
    w_c: np.ndarray   # (D, N)

    def __call__(self, u: np.ndarray):
        dt = softplus(u @ self.w_dt + self.b_dt)
        return dt, u @ self.w_b, u @ self.w_c


def ssd_chunk_heads(
    log_abar: np.ndarray,
    bvec: np.ndarray,
    cvec: np.ndarray,
    x: np.ndarray,
    s0: np.ndarray | None = None,
    block: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """Chunk form of the per-coordinate state layout used by the model.

    Each of the W feature coordinates keeps its own N-channel state, all
    driven by shared per-step vectors: S_t = exp(log_abar_t) * S_{t-1}
    + outer(bvec_t, x_t) and y_t = S_t^T cvec_t.

    Shapes: log_abar/bvec/cvec (..., T, N), x (..., T, W),
    s0 (..., N, W). Returns ((..., T, W) outputs, final (..., N, W) state).
    """
    drive = bvec[..., :, :, None] * x[..., :, None, :]
    S = decay_scan(log_abar, drive, s0, block=block)
    y = np.einsum("...tnw,...tn->...tw", S, cvec)
    return y, np.ascontiguousarray(S[..., -1, :, :])


def ssd_step_heads(
    abar: np.ndarray,
    bvec: np.ndarray,
    cvec: np.ndarray,
    x_t: np.ndarray,
    s: np.ndarray,
) -> np.ndarray:
    """One step of the per-coordinate layout; updates `s` in place.

    Returns y_t of shape (..., W). Constant work and no history buffers.
    """
    s *= abar[..., :, None]
    s += bvec[..., :, None] * x_t[..., None, :]
    return np.einsum("...nw,...n->...w", s, cvec)
