"""Dense float64 tensors with a small reverse-mode autodiff engine.

Every differentiable operation records its parents and a closure mapping the
output gradient to parent gradients. ``backward`` walks the recorded nodes in
reverse creation order, which is the reverse of execution order, visiting
each node exactly once and summing contributions across fan-out.

The op set is deliberately closed: everything the gating and scoring code
needs factors through the functions below.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, DegenerateInputError, DimensionError, NonFiniteError

LAYERNORM_EPS = 1e-5

_node_ids = itertools.count()
_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def _debug() -> bool:
    return getattr(_local, "debug", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them for differentiation."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def set_debug(flag: bool) -> None:
    """Toggle the per-op finiteness check for the current thread."""
    _local.debug = bool(flag)


@contextlib.contextmanager
def debug_mode(flag: bool):
    prev = _debug()
    set_debug(flag)
    try:
        yield
    finally:
        set_debug(prev)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "_op")
    # make ndarray <op> Tensor defer to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_node_ids)
        self._op = "leaf"

    # --- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op})"

    # --- operators -------------------------------------------------------
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    if _debug() and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._id = next(_node_ids)
    out._op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# --- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), fn, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), fn, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    out = a.data / b.data

    def fn(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), fn, "div")


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _result(a.data * s, (a,), lambda g: (g * s,), "scale")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.logaddexp(0.0, a.data), (a,), lambda g: (g * expit(a.data),), "softplus")


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(x)) evaluated as -softplus(-x)."""
    a = as_tensor(a)
    out = -np.logaddexp(0.0, -a.data)
    return _result(out, (a,), lambda g: (g * expit(-a.data),), "log_sigmoid")


def log1mexp(a) -> Tensor:
    """log(1 - exp(x)) for x < 0, switching formulas at -ln 2."""
    a = as_tensor(a)
    x = a.data
    if np.any(x >= 0):
        raise ContractError("log1mexp requires strictly negative input")
    near = x > -np.log(2.0)
    out = np.where(near, np.log(-np.expm1(np.where(near, x, -1.0))),
                   np.log1p(-np.exp(np.where(near, -1.0, x))))
    # d/dx log(1 - e^x) = -1 / expm1(-x)
    return _result(out, (a,), lambda g: (-g / np.expm1(-x),), "log1mexp")


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    inside = (a.data >= lo_) & (a.data <= hi_)
    out = np.clip(a.data, lo_, hi_)
    return _result(out, (a,), lambda g: (g * inside,), "clamp")


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _result(np.where(cond, a.data, b.data), (a, b), fn, "where")


# --- linear algebra and shape ops -------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul expects operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims {a.shape} @ {b.shape} do not match")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul: batch dims {a.shape} @ {b.shape}") from exc

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                # fold the batch dims into one GEMM instead of reducing a stack
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(np.matmul(a.data, b.data), (a, b), fn, "matmul")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(a.data[index]), (a,), fn, "getitem")


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _result(table.data[ids], (table,), fn, "embedding")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _result(np.stack([t.data for t in ts], axis=axis), ts, fn, "stack")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, fn, "concat")


# --- reductions ---------------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis, keepdims), 1.0 / count)


def max_(a, axis: int = -1) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def fn(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(out, (a,), fn, "max")


def softmax(a, mask=None) -> Tensor:
    """Softmax over the last axis. ``mask`` (broadcastable, truthy = keep)
    drives excluded entries to exactly zero probability."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(keep.any(axis=-1)):
            raise DegenerateInputError("softmax row with every entry masked out")
        x = np.where(keep, x, -np.inf)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _result(out, (a,), fn, "softmax")


def layernorm(x, gamma, beta, eps: float = LAYERNORM_EPS) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.shape[-1] != gamma.shape[-1] or x.shape[-1] != beta.shape[-1]:
        raise DimensionError(f"layernorm: feature dim {x.shape[-1]} vs affine {gamma.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def fn(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _result(out, (x, gamma, beta), fn, "layernorm")


def mean_pool_masked(x, mask) -> Tensor:
    """Average ``x[..., T, C]`` over the token axis counting only ``mask[..., T] == 1``."""
    x = as_tensor(x)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.shape[:-1]:
        raise DimensionError(f"mask shape {m.shape} does not match tokens {x.shape[:-1]}")
    count = m.sum(axis=-1, keepdims=True)
    if np.any(count == 0):
        raise DegenerateInputError("mean pooling over zero valid tokens")
    w = (m / count)[..., None]

    def fn(g):
        return (np.expand_dims(g, -2) * w,)

    return _result((x.data * w).sum(axis=-2), (x,), fn, "mean_pool_masked")


# --- backward -------------------------------------------------------------------

def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.size != 1 and grad is None:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack_ = [loss]
    while stack_:
        node = stack_.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        stack_.extend(p for p in node._parents if p.requires_grad and p._id not in nodes)

    grads: dict[int, np.ndarray] = {
        loss._id: np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=np.float64)
    }
    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        g = grads.pop(node_id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
