"""Minimal reverse-mode autodiff on numpy arrays.

A Tensor wraps an ndarray plus an optional gradient buffer and a backward
closure. Graphs are built eagerly during the forward pass and walked once,
in reverse topological order, by ``backward()``. Only the operations needed
by the encoder/decoder stacks and the training objective are provided; there
is no broadcasting magic beyond numpy's own rules (gradients of broadcast
operands are summed back to the operand's shape).

Training runs use float32; verification code switches to float64 because the
finite-difference tolerances are unreachable in single precision.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "set_nan_checks",
    "make_rng",
    "dense",
    "conv2d",
    "conv2d_transpose",
    "relu",
    "leaky_relu",
    "sigmoid",
    "softplus",
    "softmax",
    "log_softmax",
    "concat",
]

_GRAD_ENABLED = True
_NAN_CHECKS = False


class no_grad(contextlib.ContextDecorator):
    """Disable graph construction inside the block (inference paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_nan_checks(enabled: bool) -> None:
    """Verify every op output is finite (slow; meant for tests/debugging)."""
    global _NAN_CHECKS
    _NAN_CHECKS = enabled


def make_rng(seed) -> np.random.Generator:
    """The one sanctioned way to build a sampling stream; no global RNG."""
    return np.random.default_rng(seed)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """N-dimensional array with optional reverse-mode gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100  # keep numpy from hijacking reflected ops

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    @staticmethod
    def _result(data, parents, backward) -> "Tensor":
        if _NAN_CHECKS and not np.all(np.isfinite(data)):
            raise FloatingPointError("non-finite value produced by tensor op")
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=track)
        if track:
            out._parents = parents
            out._backward = backward
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        # views (broadcasts, slices) must be materialized before they can be
        # mutated by a later in-place accumulation
        if self.grad is None:
            self.grad = grad.copy() if grad.base is not None else grad
        else:
            self.grad += grad

    def backward(self) -> None:
        """Reverse-mode accumulation from a scalar output.

        The graph is consumed: interior grad buffers and parent links are
        freed as soon as they have been used, so a graph supports exactly
        one backward pass.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                node.grad = None
                node._backward = None
                node._parents = ()
        if self.grad is None:
            self.grad = np.ones_like(self.data)

    # -- arithmetic -------------------------------------------------------

    @staticmethod
    def _lift(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    def __add__(self, other):
        other = self._lift(other)
        a, b = self, other

        def back(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                gb = _unbroadcast(g, b.shape)
                if gb is g and a.requires_grad:
                    gb = g.copy()  # both parents may not share one buffer
                b._accumulate(gb)

        return self._result(a.data + b.data, (a, b), back)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def back(g):
            a._accumulate(-g)

        return self._result(-a.data, (a,), back)

    def __sub__(self, other):
        other = self._lift(other)
        a, b = self, other

        def back(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape))

        return self._result(a.data - b.data, (a, b), back)

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self, other

        def back(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return self._result(a.data * b.data, (a, b), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        a, b = self, other

        def back(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return self._result(a.data / b.data, (a, b), back)

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self

        def back(g):
            a._accumulate(g * exponent * a.data ** (exponent - 1))

        return self._result(a.data**exponent, (a,), back)

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def back(g):
            a._accumulate(g * out_data)

        return self._result(out_data, (a,), back)

    def log(self):
        a = self

        def back(g):
            a._accumulate(g / a.data)

        return self._result(np.log(a.data), (a,), back)

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)

        def back(g):
            a._accumulate(g * (0.5 / out_data))

        return self._result(out_data, (a,), back)

    def abs(self):
        a = self

        def back(g):
            a._accumulate(g * np.sign(a.data))

        return self._result(np.abs(a.data), (a,), back)

    # -- reductions / shaping ----------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def back(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accumulate(np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False))

        return self._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = 1
            for ax in axes:
                count *= self.data.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old_shape = a.shape

        def back(g):
            a._accumulate(g.reshape(old_shape))

        return self._result(a.data.reshape(shape), (a,), back)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inverse = tuple(np.argsort(axes))

        def back(g):
            a._accumulate(g.transpose(inverse))

        return self._result(a.data.transpose(axes), (a,), back)

    def __getitem__(self, key):
        a = self
        parts = key if isinstance(key, tuple) else (key,)
        fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)

        def back(g):
            full = np.zeros_like(a.data)
            if fancy:
                np.add.at(full, key, g)  # repeated indices must accumulate
            else:
                full[key] = g
            a._accumulate(full)

        return self._result(a.data[key], (a,), back)

    # -- linear algebra -----------------------------------------------------

    def __matmul__(self, other):
        other = self._lift(other)
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ValueError("matmul expects 2-d operands")

        def back(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return self._result(a.data @ b.data, (a, b), back)

    def maximum(self, value: float):
        a = self
        mask = a.data > value

        def back(g):
            a._accumulate(g * mask)

        return self._result(np.where(mask, a.data, np.array(value, dtype=a.dtype)), (a,), back)


# -- free functions (network ops) -------------------------------------------


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with x: [B, n], weight: [n, m]."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(
            f"dense: input width {x.shape[-1]} does not match weight rows {weight.shape[0]}"
        )
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out


def relu(x: Tensor) -> Tensor:
    return x.maximum(0.0)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    a = x
    mask = a.data > 0

    def back(g):
        a._accumulate(g * np.where(mask, 1.0, slope))

    return Tensor._result(np.where(mask, a.data, a.data * slope), (a,), back)


def sigmoid(x: Tensor) -> Tensor:
    a = x
    # stable in both tails
    out_data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)), np.exp(a.data) / (1.0 + np.exp(a.data)))
    out_data = out_data.astype(a.dtype, copy=False)

    def back(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return Tensor._result(out_data, (a,), back)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) with the usual overflow-safe rewrite."""
    a = x
    out_data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    sig = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)), np.exp(a.data) / (1.0 + np.exp(a.data)))

    def back(g):
        a._accumulate(g * sig)

    return Tensor._result(out_data.astype(a.dtype, copy=False), (a,), back)


def _softmax_data(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Row-normalized softmax over the last axis."""
    a = x
    out_data = _softmax_data(a.data)

    def back(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        a._accumulate(out_data * (g - inner))

    return Tensor._result(out_data, (a,), back)


def log_softmax(x: Tensor) -> Tensor:
    a = x
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - log_z
    probs = np.exp(out_data)

    def back(g):
        a._accumulate(g - probs * g.sum(axis=-1, keepdims=True))

    return Tensor._result(out_data, (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(Tensor._lift(t) for t in tensors)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    return Tensor._result(np.concatenate([p.data for p in parts], axis=axis), parts, back)


# -- convolution -------------------------------------------------------------
#
# Both directions are built from one im2col primitive plus a 16-slice
# scatter-add (kernel positions loop), which keeps everything on BLAS matmuls.


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """Return (cols [B*Ho*Wo, C*k*k], Ho, Wo) for padded input x [B,C,H,W]."""
    b, c, h, w = x.shape
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ValueError(f"conv2d: spatial input {h}x{w} smaller than kernel {k}x{k}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [B, C, Ho, Wo, k, k]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(cols: np.ndarray, b: int, c: int, h: int, w: int, k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add columns back onto a [B,C,H,W] grid."""
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    patches = cols.reshape(b, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)  # [B,C,k,k,Ho,Wo]
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += patches[:, :, i, j]
    return out[:, :, pad : pad + h, pad : pad + w] if pad else out


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 2, pad: int = 1) -> Tensor:
    """Cross-correlation of x [B,C,H,W] with kernel [F,C,k,k]."""
    a, w = x, kernel
    bt, c, h, wd = a.shape
    f, ck, k, k2 = w.shape
    if k != k2:
        raise ValueError("conv2d: kernel must be square")
    if ck != c:
        raise ValueError(f"conv2d: kernel expects {ck} input channels, got {c}")
    cols, ho, wo = _im2col(a.data, k, stride, pad)
    w_mat = w.data.reshape(f, c * k * k)
    y = (cols @ w_mat.T).reshape(bt, ho, wo, f).transpose(0, 3, 1, 2)
    if bias is not None:
        y = y + bias.data[None, :, None, None]
    parents = (a, w) if bias is None else (a, w, bias)

    def back(g):
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bt * ho * wo, f)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            w._accumulate((g_mat.T @ cols).reshape(w.shape))
        if a.requires_grad:
            g_cols = g_mat @ w_mat
            a._accumulate(_col2im(g_cols, bt, c, h, wd, k, stride, pad))

    return Tensor._result(np.ascontiguousarray(y), parents, back)


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 2, pad: int = 1) -> Tensor:
    """Adjoint of conv2d: x [B,F,H,W], kernel [F,C,k,k] -> [B,C,Ho,Wo].

    Output spatial size is (H-1)*stride - 2*pad + k, the exact mirror of the
    conv2d geometry, so a 4x4/stride-2/pad-1 stack doubles resolution.
    """
    a, w = x, kernel
    bt, f, h, wd = a.shape
    fk, c, k, k2 = w.shape
    if k != k2:
        raise ValueError("conv2d_transpose: kernel must be square")
    if fk != f:
        raise ValueError(f"conv2d_transpose: kernel expects {fk} input channels, got {f}")
    ho = (h - 1) * stride - 2 * pad + k
    wo = (wd - 1) * stride - 2 * pad + k
    w_mat = w.data.reshape(f, c * k * k)
    x_mat = np.ascontiguousarray(a.data.transpose(0, 2, 3, 1)).reshape(bt * h * wd, f)
    y = _col2im(x_mat @ w_mat, bt, c, ho, wo, k, stride, pad)
    if bias is not None:
        y = y + bias.data[None, :, None, None]
    parents = (a, w) if bias is None else (a, w, bias)

    def back(g):
        # adjoint of the scatter is the gather: im2col of the output grad
        g_cols, gho, gwo = _im2col(g, k, stride, pad)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            w._accumulate((x_mat.T @ g_cols).reshape(w.shape))
        if a.requires_grad:
            ga = (g_cols @ w_mat.T).reshape(bt, gho, gwo, f).transpose(0, 3, 1, 2)
            a._accumulate(np.ascontiguousarray(ga))

    return Tensor._result(y, parents, back)
