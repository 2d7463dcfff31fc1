"""Minimal reverse-mode automatic differentiation over numpy arrays.

A tape of `Var` nodes, micrograd-style but tensor-valued: each operation
records a closure that scatters the output gradient back to its inputs.
The model is small enough that this plus two hand-derived primitives
(the temporal decay scan and convolution patch extraction) covers every
trainable operation; correctness is pinned by finite-difference tests.

Inside a ``no_grad()`` block no graph is recorded, so the same forward
code serves inference.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import alloc
from .ssd import decay_scan as _decay_scan_np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Var:
    """A node in the computation graph wrapping an ndarray value."""

    __slots__ = ("data", "grad", "_backward", "_prev")

    def __init__(self, data, _prev=()):
        self.data = np.asarray(data)
        alloc.tracked(self.data)
        self.grad = None
        self._backward = None
        self._prev = _prev if _grad_enabled else ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def _make(self, data, prev, backward):
        out = Var(data, prev)
        if _grad_enabled:
            out._backward = backward
        return out

    def _accum(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data, dtype=np.float64)
        self.grad += grad

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_var(other)
        out = self._make(self.data + other.data, (self, other), None)

        def backward(g):
            self._accum(_unbroadcast(g, self.shape))
            other._accum(_unbroadcast(g, other.shape))

        out._backward = backward if _grad_enabled else None
        return out

    __radd__ = __add__

    def __neg__(self):
        out = self._make(-self.data, (self,), None)
        out._backward = (lambda g: self._accum(-g)) if _grad_enabled else None
        return out

    def __sub__(self, other):
        return self + (-as_var(other))

    def __rsub__(self, other):
        return as_var(other) + (-self)

    def __mul__(self, other):
        other = as_var(other)
        out = self._make(self.data * other.data, (self, other), None)

        def backward(g):
            self._accum(_unbroadcast(g * other.data, self.shape))
            other._accum(_unbroadcast(g * self.data, other.shape))

        out._backward = backward if _grad_enabled else None
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_var(other)
        out = self._make(self.data / other.data, (self, other), None)

        def backward(g):
            self._accum(_unbroadcast(g / other.data, self.shape))
            other._accum(
                _unbroadcast(-g * self.data / (other.data * other.data), other.shape)
            )

        out._backward = backward if _grad_enabled else None
        return out

    def __pow__(self, exponent: float):
        out = self._make(self.data**exponent, (self,), None)

        def backward(g):
            self._accum(g * exponent * self.data ** (exponent - 1))

        out._backward = backward if _grad_enabled else None
        return out

    def __matmul__(self, other):
        other = as_var(other)
        out = self._make(self.data @ other.data, (self, other), None)

        def backward(g):
            self._accum(
                _unbroadcast(g @ other.data.swapaxes(-1, -2), self.shape)
            )
            other._accum(
                _unbroadcast(self.data.swapaxes(-1, -2) @ g, other.shape)
            )

        out._backward = backward if _grad_enabled else None
        return out

    # -- elementwise functions ----------------------------------------------

    def exp(self):
        y = np.exp(self.data)
        out = self._make(y, (self,), None)
        out._backward = (lambda g: self._accum(g * y)) if _grad_enabled else None
        return out

    def log(self):
        out = self._make(np.log(self.data), (self,), None)
        out._backward = (
            (lambda g: self._accum(g / self.data)) if _grad_enabled else None
        )
        return out

    def tanh(self):
        y = np.tanh(self.data)
        out = self._make(y, (self,), None)
        out._backward = (
            (lambda g: self._accum(g * (1.0 - y * y))) if _grad_enabled else None
        )
        return out

    def sqrt(self):
        y = np.sqrt(self.data)
        out = self._make(y, (self,), None)
        out._backward = (
            (lambda g: self._accum(g * 0.5 / y)) if _grad_enabled else None
        )
        return out

    def softplus(self):
        x = self.data
        y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
        out = self._make(y, (self,), None)

        def backward(g):
            sig = 0.5 * (1.0 + np.tanh(0.5 * x))
            self._accum(g * sig)

        out._backward = backward if _grad_enabled else None
        return out

    # -- reductions and shape ops -------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = self._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), None)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.shape).copy())

        out._backward = backward if _grad_enabled else None
        return out

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        out = self._make(self.data.reshape(shape), (self,), None)
        out._backward = (
            (lambda g: self._accum(g.reshape(old))) if _grad_enabled else None
        )
        return out

    def transpose(self, axes):
        inv = np.argsort(axes)
        out = self._make(self.data.transpose(axes), (self,), None)
        out._backward = (
            (lambda g: self._accum(g.transpose(inv))) if _grad_enabled else None
        )
        return out

    def __getitem__(self, idx):
        out = self._make(self.data[idx], (self,), None)

        def backward(g):
            full = np.zeros_like(self.data, dtype=np.float64)
            np.add.at(full, idx, g)
            self._accum(full)

        out._backward = backward if _grad_enabled else None
        return out

    def where(self, mask: np.ndarray, other):
        """Select self where mask, else other; mask is non-differentiable."""
        other = as_var(other)
        out = self._make(np.where(mask, self.data, other.data), (self, other), None)

        def backward(g):
            self._accum(_unbroadcast(np.where(mask, g, 0.0), self.shape))
            other._accum(_unbroadcast(np.where(mask, 0.0, g), other.shape))

        out._backward = backward if _grad_enabled else None
        return out

    # -- engine ---------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar loss")
        topo: list[Var] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))
        self.grad = np.ones_like(self.data, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


# -- custom primitives --------------------------------------------------------


def decay_scan(log_abar: Var, drive: Var, block: int = 64) -> Var:
    """Differentiable temporal decay scan (zero initial state).

    Forward states come from the blocked kernel evaluation; the backward
    pass is the same scan run in reverse over the output gradients, so both
    directions stay O(T) in time and memory.
    """
    la, u = log_abar.data, drive.data
    states = _decay_scan_np(la, u, None, block=block)
    out = Var(states, (log_abar, drive))

    def backward(g):
        squeeze = u.ndim == la.ndim
        g_ = g[..., None] if squeeze else g
        # reversed adjoint recurrence R_t = G_t + abar_{t+1} * R_{t+1}
        la_rev = np.concatenate(
            [np.zeros_like(la[..., :1, :]), la[..., :0:-1, :]], axis=-2
        )
        r = _decay_scan_np(la_rev, g_[..., ::-1, :, :], None, block=block)
        r = r[..., ::-1, :, :]
        drive._accum(r[..., 0] if squeeze else r)
        s_all = states[..., None] if squeeze else states
        s_prev = np.concatenate(
            [np.zeros_like(s_all[..., :1, :, :]), s_all[..., :-1, :, :]], axis=-3
        )
        la_grad = (np.exp(la)[..., None] * r * s_prev).sum(axis=-1)
        log_abar._accum(_unbroadcast(la_grad, la.shape))

    out._backward = backward if _grad_enabled else None
    return out


def extract_patches(x: Var, ksize: int, stride: int, pad: int) -> Var:
    """im2col for NHWC batches: returns (B, Ho, Wo, ksize*ksize*C) columns.

    Backward scatter-adds column gradients back onto the padded image grid.
    """
    b, h, w, c = x.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (ksize, ksize), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # (B, Ho, Wo, C, k, k)
    ho, wo = windows.shape[1], windows.shape[2]
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(b, ho, wo, ksize * ksize * c)
    out = Var(np.ascontiguousarray(cols), (x,))

    def backward(g):
        g = g.reshape(b, ho, wo, ksize, ksize, c)
        gpad = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=np.float64)
        for i in range(ksize):
            for j in range(ksize):
                gpad[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += g[
                    :, :, :, i, j
                ]
        x._accum(gpad[:, pad : pad + h, pad : pad + w])

    out._backward = backward if _grad_enabled else None
    return out


def concat(vars_: list[Var], axis: int) -> Var:
    datas = [v.data for v in vars_]
    out = Var(np.concatenate(datas, axis=axis), tuple(vars_))
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for v, start, stop in zip(vars_, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, stop)
            v._accum(g[tuple(idx)])

    out._backward = backward if _grad_enabled else None
    return out
