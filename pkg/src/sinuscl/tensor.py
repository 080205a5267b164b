"""Dense n-d tensor with reverse-mode automatic differentiation.

Tensors wrap a numpy array. Every op builds a node holding its parents and a
closure that maps the output gradient to one gradient per parent; ``backward``
replays the nodes in reverse topological order. Data arrays are never mutated
in place once they participate in a graph.

Default precision is float32. ``high_precision()`` switches newly created
tensors to float64, which is what the finite-difference checks run under.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from . import kernels

_state = {"dtype": np.float32, "grad_enabled": True}

ArrayLike = Union[np.ndarray, float, int, Sequence]


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def high_precision():
    """Create tensors as float64 inside the block (gradient verification mode)."""
    prev = _state["dtype"]
    _state["dtype"] = np.float64
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    """Skip graph recording inside the block (inference)."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _state["dtype"])
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # operators -----------------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(x)
    return Tensor(x, dtype=dtype)


def _result_dtype(*ts):
    return np.result_type(*(t.data.dtype for t in ts))


def _make(data, parents: Iterable[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    parents = tuple(parents)
    needs = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, opname: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{opname}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


def _coerce_pair(a, b):
    # python scalars adopt the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return a, b


# elementwise binary ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw)


# shape ---------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


# elementwise unary -----------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: (g * (out > 0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError(f"log: domain error, input has non-positive entries (min {a.data.min()!r})")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError(f"sqrt: domain error, input has negative entries (min {a.data.min()!r})")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2 * out),))


# reductions ----------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axes, keepdims) * (1.0 / n)


def max_along(a: Tensor, axis: int, keepdims=False) -> Tensor:
    """Maximum over one axis; the gradient goes to the first maximal entry."""
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, np.expand_dims(idx, axis), gk, axis=axis)
        return (full,)

    return _make(out, (a,), bw)


def global_avg_pool(a: Tensor) -> Tensor:
    """Average over every axis after (batch, channel)."""
    return mean(a, axis=tuple(range(2, a.ndim)))


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of a (batch, dim) tensor to unit Euclidean norm."""
    norms = np.sqrt((v.data.astype(np.float64) ** 2).sum(axis=1, keepdims=True))
    if np.any(norms < eps):
        bad = int(np.argmax(norms[:, 0] < eps))
        raise ValueError(f"l2_normalize: row {bad} has norm {norms[bad, 0]:.3g} < {eps} (degenerate embedding)")
    norms = norms.astype(v.dtype)
    out = v.data / norms

    def bw(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((g - out * dot) / norms,)

    return _make(out, (v,), bw)


# convolution ---------------------------------------------------------------

def conv3d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """3-d cross-correlation of (B, Cin, D, H, W) with (Cout, Cin, kd, kh, kw)."""
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv3d expects 5-d input and kernel, got {x.shape} and {w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv3d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    B, C, D, H, W = x.shape
    cout, cin, kd, kh, kw = w.shape
    if cin != C:
        raise ValueError(f"conv3d: input has {C} channels but kernel expects {cin}")
    pd = (D + 2 * padding, H + 2 * padding, W + 2 * padding)
    if kd > pd[0] or kh > pd[1] or kw > pd[2]:
        raise ValueError(f"conv3d: kernel {(kd, kh, kw)} larger than padded input {pd}")
    dtype = _result_dtype(x, w)
    xd = np.ascontiguousarray(x.data, dtype=dtype)
    wd = np.ascontiguousarray(w.data, dtype=dtype)
    Do = (pd[0] - kd) // stride + 1
    Ho = (pd[1] - kh) // stride + 1
    Wo = (pd[2] - kw) // stride + 1
    K = C * kd * kh * kw
    cols = np.empty((B * Do * Ho * Wo, K), dtype=dtype)
    kernels.im2col3d(xd, cols, kd, kh, kw, stride, padding)
    wmat = wd.reshape(cout, K)
    out = (cols @ wmat.T).reshape(B, Do, Ho, Wo, cout).transpose(0, 4, 1, 2, 3)
    out = np.ascontiguousarray(out)

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, cout)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = gmat @ wmat
            gx = np.zeros(x.shape, dtype=dtype)
            kernels.col2im3d(gcols, gx, kd, kh, kw, stride, padding)
        return gx, gw

    return _make(out, (x, w), bw)


# graph ---------------------------------------------------------------------

def _topo_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it (accumulating)."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=parent.dtype)
