"""Reverse-mode automatic differentiation over dense numpy arrays.

The op set is the minimum the frame encoder and its heads need: matmul,
add/mul, tanh, softmax over an axis, layer norm, strided 1-D convolution,
embedding lookup, cross entropy, elementwise mask select, mean/sum, and
the shape plumbing (reshape/transpose) that multi-head attention requires.

Every op validates shapes up front and checks its output for non-finite
values; gradients are propagated by walking the tape in reverse
topological order from a scalar loss. Tensors are plain wrappers around
numpy arrays, double precision by default, single precision permitted.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DimensionError, InputError, LabelError, NumericError

_FINITE_CHECKS = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op non-finite detection. Returns the previous setting."""
    global _FINITE_CHECKS
    previous = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return previous


class Tensor:
    """Dense row-major array with an optional gradient tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backprop = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise InputError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor) or np.asarray(other).size != 1:
            raise InputError("Tensor division only supports scalar constants")
        return mul(self, 1.0 / float(np.asarray(other).reshape(())))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    # -- backward pass ---------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise InputError(f"backward() needs a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap a constant as a non-grad Tensor, matching `like`'s dtype."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None and np.issubdtype(np.asarray(arr).dtype, np.floating):
        arr = arr.astype(like.dtype, copy=False)
    return Tensor(arr)


def zero_grads(tensors) -> None:
    values = tensors.values() if hasattr(tensors, "values") else tensors
    for t in values:
        t.grad = None


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op '{op}'")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
    return out


# -- elementwise and linear ops -----------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = _result(data, (a, b), "add")
    if out.requires_grad:
        def _bp(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(g, b.shape))
        out._backprop = _bp
    return out


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = _result(data, (a, b), "mul")
    if out.requires_grad:
        def _bp(g):
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
            _accumulate(b, _unbroadcast(g * a.data, b.shape))
        out._backprop = _bp
    return out


def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        data = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = _result(data, (a, b), "matmul")
    if out.requires_grad:
        def _bp(g):
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
        out._backprop = _bp
    return out


def tanh(x) -> Tensor:
    x = as_tensor(x)
    data = np.tanh(x.data)
    out = _result(data, (x,), "tanh")
    if out.requires_grad:
        def _bp(g):
            _accumulate(x, g * (1.0 - data * data))
        out._backprop = _bp
    return out


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along `axis`; rows sum to 1 by construction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)
    out = _result(data, (x,), "softmax")
    if out.requires_grad:
        def _bp(g):
            inner = (g * data).sum(axis=axis, keepdims=True)
            _accumulate(x, data * (g - inner))
        out._backprop = _bp
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = as_tensor(x)
    gain = as_tensor(gain, like=x)
    bias = as_tensor(bias, like=x)
    width = x.shape[-1] if x.data.ndim else 0
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({width},) for input {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data
    out = _result(data, (x, gain, bias), "layer_norm")
    if out.requires_grad:
        def _bp(g):
            _accumulate(bias, _unbroadcast(g, bias.shape))
            _accumulate(gain, _unbroadcast(g * xhat, gain.shape))
            gx = g * gain.data
            dx = inv * (
                gx
                - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            )
            _accumulate(x, dx)
        out._backprop = _bp
    return out


def conv1d(x, w, b, stride: int = 1) -> Tensor:
    """Strided valid 1-D convolution.

    x: (batch, in_channels, length), w: (out_channels, in_channels, kernel),
    b: (out_channels,). Output length is (length - kernel) // stride + 1.
    """
    x = as_tensor(x)
    w = as_tensor(w, like=x)
    b = as_tensor(b, like=x)
    if x.data.ndim != 3 or w.data.ndim != 3 or b.data.ndim != 1:
        raise DimensionError(f"conv1d: need x (B,C,L), w (O,C,K), b (O,), got {x.shape}, {w.shape}, {b.shape}")
    if stride < 1:
        raise InputError(f"conv1d: stride must be >= 1, got {stride}")
    batch, c_in, length = x.shape
    c_out, c_in_w, kernel = w.shape
    if c_in != c_in_w or b.shape[0] != c_out:
        raise DimensionError(f"conv1d: channel mismatch between x {x.shape}, w {w.shape}, b {b.shape}")
    if length < kernel:
        raise DimensionError(f"conv1d: input length {length} is shorter than the kernel span {kernel}")
    t_out = (length - kernel) // stride + 1
    data = np.zeros((batch, c_out, t_out), dtype=x.dtype)
    stop = kernel + stride * (t_out - 1)
    for k in range(kernel):
        window = x.data[:, :, k : k + stop - kernel + 1 : stride]
        data += np.einsum("oi,bit->bot", w.data[:, :, k], window, optimize=True)
    data += b.data[None, :, None]
    out = _result(data, (x, w, b), "conv1d")
    if out.requires_grad:
        def _bp(g):
            _accumulate(b, g.sum(axis=(0, 2)))
            gx = np.zeros_like(x.data)
            gw = np.zeros_like(w.data)
            for k in range(kernel):
                sl = slice(k, k + stop - kernel + 1, stride)
                gw[:, :, k] = np.einsum("bot,bit->oi", g, x.data[:, :, sl], optimize=True)
                gx[:, :, sl] += np.einsum("oi,bot->bit", w.data[:, :, k], g, optimize=True)
            _accumulate(w, gw)
            _accumulate(x, gx)
        out._backprop = _bp
    return out


def embedding(table, ids) -> Tensor:
    """Row lookup: table (V, D) indexed by an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError("embedding: ids must be integers")
    if table.data.ndim != 2:
        raise DimensionError(f"embedding: table must be 2-d, got {table.shape}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise InputError(f"embedding: ids must lie in [0, {vocab})")
    data = table.data[ids]
    out = _result(data, (table,), "embedding")
    if out.requires_grad:
        def _bp(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            _accumulate(table, gt)
        out._backprop = _bp
    return out


def cross_entropy(logits, labels) -> Tensor:
    """Per-row cross entropy over the last axis against integer labels.

    Returns one loss per row (shape = logits.shape[:-1]); reduce with
    mean() or a masked sum as the caller requires.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise InputError("cross_entropy: labels must be integers")
    if logits.data.ndim < 1:
        raise DimensionError("cross_entropy: logits must have a class axis")
    n_classes = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(
            f"cross_entropy: labels shape {labels.shape} does not match logit rows {logits.shape[:-1]}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"cross_entropy: label codes must lie in [0, {n_classes})")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(shifted, labels[..., None], axis=-1)
    data = (lse - picked)[..., 0]
    out = _result(data, (logits,), "cross_entropy")
    if out.requires_grad:
        def _bp(g):
            p = np.exp(shifted - lse)
            gl = p * g[..., None]
            idx = labels[..., None]
            np.put_along_axis(gl, idx, np.take_along_axis(gl, idx, axis=-1) - g[..., None], axis=-1)
            _accumulate(logits, gl)
        out._backprop = _bp
    return out


def where(mask, a, b) -> Tensor:
    """Elementwise mask select: mask is a constant boolean array."""
    mask = np.asarray(mask, dtype=bool)
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    try:
        data = np.where(mask, a.data, b.data)
    except ValueError:
        raise DimensionError(
            f"where: mask {mask.shape} and operands {a.shape}, {b.shape} do not broadcast"
        ) from None
    out = _result(data, (a, b), "where")
    if out.requires_grad:
        def _bp(g):
            zero = np.zeros((), dtype=g.dtype)
            _accumulate(a, _unbroadcast(np.where(mask, g, zero), a.shape))
            _accumulate(b, _unbroadcast(np.where(mask, zero, g), b.shape))
        out._backprop = _bp
    return out


# -- reductions and shape plumbing ---------------------------------------


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if x.data.size == 0:
        raise InputError("mean of an empty tensor is undefined")
    data = x.data.mean(axis=axis, keepdims=keepdims)
    axes = _normalize_axes(axis, x.data.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if x.data.ndim else 1
    out = _result(np.asarray(data), (x,), "mean")
    if out.requires_grad:
        def _bp(g):
            if not keepdims:
                for a in sorted(axes):
                    g = np.expand_dims(g, a)
            _accumulate(x, np.broadcast_to(g, x.shape) / count)
        out._backprop = _bp
    return out


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)
    axes = _normalize_axes(axis, x.data.ndim)
    out = _result(np.asarray(data), (x,), "sum")
    if out.requires_grad:
        def _bp(g):
            if not keepdims:
                for a in sorted(axes):
                    g = np.expand_dims(g, a)
            _accumulate(x, np.broadcast_to(g, x.shape).astype(x.dtype, copy=False))
        out._backprop = _bp
    return out


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    out = _result(data, (x,), "reshape")
    if out.requires_grad:
        def _bp(g):
            _accumulate(x, g.reshape(x.shape))
        out._backprop = _bp
    return out


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    data = np.transpose(x.data, axes)
    out = _result(data, (x,), "transpose")
    if out.requires_grad:
        inverse = None if axes is None else tuple(np.argsort(axes))
        def _bp(g):
            _accumulate(x, np.transpose(g, inverse))
        out._backprop = _bp
    return out
