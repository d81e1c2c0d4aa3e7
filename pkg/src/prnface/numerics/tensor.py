"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray``. Every operation on tensors that
require gradients records a node holding its parents and a closure mapping
the output gradient to parent gradients. :meth:`Tensor.backward` walks the
recorded graph in reverse topological order and accumulates into the
``grad`` buffers of leaf tensors.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class GraphStateError(RuntimeError):
    """Raised when backward is requested on a tensor with no recorded graph."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def _check_finite(data: np.ndarray, op: str) -> None:
    if data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undo numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fiub":
            raise TypeError(f"unsupported dtype {arr.dtype}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    @property
    def is_recorded(self) -> bool:
        return self._backward is not None

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    # -- graph traversal ---------------------------------------------------

    def _topo_order(self) -> list["Tensor"]:
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
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad.

        The graph is released afterwards; a second call raises
        :class:`GraphStateError`.
        """
        if not self.is_recorded:
            raise GraphStateError(
                "backward() called on a tensor without a recorded forward pass"
            )
        if grad is None:
            if self.data.size != 1:
                raise ValueError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order = self._topo_order()
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is not None:
                    node.grad += g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x))
    return Tensor(x, dtype=dtype)


def _const_like(x, ref: Tensor) -> Tensor:
    """Wrap Python scalars so they take the reference tensor's dtype."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b)
    b = _const_like(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b)
    b = _const_like(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b)
    b = _const_like(b, a)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b)
    b = _const_like(b, a)

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data / b.data, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(a.data**exponent, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    def backward(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), backward, "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), backward, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Split on sign so exp never overflows.
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)

    def backward(g):
        return (g * out * (1 - out),)

    return _make(out, (a,), backward, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1 - out * out),)

    return _make(out, (a,), backward, "tanh")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), backward, "sqrt")


def l2_norm(a: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at the origin is 0."""
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))

    def backward(g):
        safe = np.where(n > 0, n, 1)
        scale = np.where(n > 0, 1 / safe, 0)
        return (np.expand_dims(g, axis) * a.data * scale,)

    return _make(np.squeeze(n, axis=axis), (a,), backward, "l2_norm")


# -- reductions and shape ops --------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(np.asarray(out), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inverse = None if axes is None else tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make(np.transpose(a.data, axes), (a,), backward, "transpose")


def take(a: Tensor, index) -> Tensor:
    """Basic or fancy indexing; repeated indices accumulate on backward."""

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(a.data[index]), (a,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


def broadcast_to(a: Tensor, shape) -> Tensor:
    def backward(g):
        return (_unbroadcast(g, a.shape),)

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), backward, "broadcast_to")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; ``a`` may carry leading batch dims, ``b`` is 2-D or batched."""
    a = as_tensor(a)
    b = as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        if not b.requires_grad:
            return ga, None
        if b.ndim == 2:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


# -- fused layers --------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution in NHWC layout with an HWIO kernel."""
    n, h, wd, c = x.shape
    kh, kw, ci, co = w.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernel {ci}")
    p, s = padding, stride
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if kh == 1 and kw == 1 and p == 0:
        xs = x.data[:, ::s, ::s, :] if s > 1 else x.data
        cols = xs.reshape(-1, c)
    else:
        xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s]
        win = win[:, :ho, :wo]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    wmat = w.data.reshape(kh * kw * c, co)
    out = (cols @ wmat).reshape(n, ho, wo, co)

    def backward(g):
        g2 = g.reshape(-1, co)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        if not x.requires_grad:
            return None, gw
        gcols = g2 @ wmat.T
        if kh == 1 and kw == 1 and p == 0:
            if s == 1:
                gx = gcols.reshape(x.shape)
            else:
                gx = np.zeros_like(x.data)
                gx[:, ::s, ::s, :] = gcols.reshape(n, ho, wo, c)
            return gx, gw
        gcols = gcols.reshape(n, ho, wo, kh, kw, c)
        gxp = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, p : p + h, p : p + wd, :] if p else gxp
        return gx, gw

    return _make(out, (x, w), backward, "conv2d")


def max_pool2d(x: Tensor, size: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    n, h, wd, c = x.shape
    p, s, k = padding, stride, size
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)), constant_values=-np.inf)
    ho = (h + 2 * p - k) // s + 1
    wo = (wd + 2 * p - k) // s + 1
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
    win = win.reshape(n, ho, wo, c, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            gxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += np.where(arg == idx, g, 0)
        return (gxp[:, p : p + h, p : p + wd, :],)

    return _make(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.99,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize over every axis but the last.

    In train mode batch statistics are used and the running buffers are
    updated in place (``running = momentum * running + (1 - momentum) * batch``).
    """
    axes = tuple(range(x.ndim - 1))
    count = int(np.prod([x.shape[a] for a in axes]))
    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * (count / (count - 1)) if count > 1 else var
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * unbiased
    else:
        mu = running_mean
        var = running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data
        if train:
            gx = (inv_std / count) * (
                count * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes)
            )
        else:
            gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return _make(out.astype(x.dtype), (x, gamma, beta), backward, "batch_norm")


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (logits,), backward, "log_softmax")
