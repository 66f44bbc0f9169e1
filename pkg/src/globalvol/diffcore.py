"""Minimal reverse-mode automatic differentiation over float64 arrays.

The graph is built while the forward pass runs. Every non-leaf tensor keeps
references to its parents and a closure mapping the output gradient to
parent gradients. Node ids increase with creation time, so sorting the
reachable nodes by id gives a valid topological order without recursion
(sequences of a few thousand steps would exhaust Python's stack).
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class DiffError(Exception):
    """Base class for engine errors."""


class ShapeError(DiffError, ValueError):
    pass


class DomainError(DiffError, ValueError):
    pass


class ContractError(DiffError, ValueError):
    pass


_node_ids = itertools.count()
# per thread, so a no_grad block in one worker never strips another's graph
_mode = threading.local()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (current thread only)."""
    prev = is_grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A dense float64 array that can take part in the graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "op", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, *, name: str | None = None,
                 _parents: tuple = (), _backward: BackwardFn | None = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._id = next(_node_ids)
        self.op = op
        self.name = name

    # -- array-ish surface -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the values."""
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

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

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Leaf constructor; always copies ``data``."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn,
              op: str) -> Tensor:
    """Wrap ``data`` as the output of a differentiable operation.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    ``None``) per parent. This is also the extension point for fused ops.
    """
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents),
                      _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: operands with shapes {a.shape} and {b.shape} "
                         "do not broadcast") from None


# ---------------------------------------------------------------------------
# Binary elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return make_node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return make_node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return make_node(out, (a, b), bw, "div")


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "maximum")
    pick_a = a.data >= b.data

    def bw(g):
        return (_unbroadcast(g * pick_a, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ~pick_a, b.shape) if b.requires_grad else None)

    return make_node(np.maximum(a.data, b.data), (a, b), bw, "maximum")


# ---------------------------------------------------------------------------
# Unary elementwise
# ---------------------------------------------------------------------------

def neg(x) -> Tensor:
    x = as_tensor(x)
    return make_node(-x.data, (x,), lambda g: (-g,), "neg")


def square(x) -> Tensor:
    x = as_tensor(x)
    return make_node(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    p = float(exponent)
    if not p.is_integer() and np.any(x.data < 0):
        raise DomainError("power: negative base with non-integer exponent")
    out = x.data ** p
    return make_node(out, (x,), lambda g: (g * p * x.data ** (p - 1.0),), "power")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(x.data)
    return make_node(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        bad = np.argwhere(x.data <= 0)[0]
        raise DomainError(f"log of non-positive value {x.data[tuple(bad)]!r} at index {tuple(bad)}")
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus_array(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = sigmoid_array(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def softplus(x) -> Tensor:
    """``log(1 + e^x)`` in the overflow-safe form ``max(x, 0) + log1p(e^-|x|)``."""
    x = as_tensor(x)
    out = softplus_array(x.data)
    return make_node(out, (x,), lambda g: (g * sigmoid_array(x.data),), "softplus")


_ELEMENTWISE = {
    "add": add, "mul": mul, "sub": sub, "div": div,
    "sigmoid": sigmoid, "tanh": tanh, "softplus": softplus, "relu": relu,
    "log": log, "exp": exp, "neg": neg, "square": square, "sqrt": sqrt,
}


def elementwise(op: str, *inputs) -> Tensor:
    """Dispatch an elementwise operation by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


# ---------------------------------------------------------------------------
# Linear algebra, reductions, shape
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with NumPy's batching rules (leading dims broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: need at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} "
                         "do not broadcast") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_node(out, (a, b), bw, "matmul")


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_node(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    return make_node(np.swapaxes(x.data, a1, a2), (x,),
                     lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
                for i in parts)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_node(np.array(out, copy=True), (x,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes " + ", ".join(str(t.shape) for t in ts)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, ts))

    return make_node(out, tuple(ts), bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) if t.requires_grad else None
                     for i, t in enumerate(ts))

    return make_node(out, tuple(ts), bw, "stack")


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is True get weight 0."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        z = np.where(mask, -np.inf, z)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return make_node(out, (x,), bw, "softmax")


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _reachable(root: Tensor) -> list[Tensor]:
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen.add(node._id)
        nodes.append(node)
        stack.extend(p for p in node._parents if p.requires_grad)
    nodes.sort(key=lambda n: n._id, reverse=True)
    return nodes


def backward(root: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    ``root`` must hold a single value. Repeated calls accumulate; call
    :func:`zero_grad` between optimisation steps.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    seed = np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=np.float64)
    pending = {root._id: seed}
    for node in _reachable(root):
        g = pending.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = pending.get(parent._id)
            pending[parent._id] = pg if prev is None else prev + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **kw)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
              state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    A ``None`` gradient counts as zero.
    """
    if not lr > 0:
        raise ContractError(f"lr must be positive, got {lr}")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ContractError("params, grads and optimiser state differ in length")
    for p, g, m in zip(params, grads, state.m):
        if m.shape != p.shape or (g is not None and np.shape(g) != p.shape):
            raise ContractError(f"shape mismatch in adam_step for parameter of shape {p.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class Adam:
    """Stateful wrapper over :func:`adam_step` reading ``p.grad``."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.for_params(self.params)

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr)


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``."""
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def numeric_grad(fn: Callable[[], float], x: Tensor, eps: float = 1e-5,
                 order: int = 2) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` with respect to ``x.data``.

    ``order=4`` uses the five-point stencil, whose O(eps^4) truncation error
    allows a larger ``eps`` and so less cancellation on sharply curved losses.
    """
    if order not in (2, 4):
        raise ContractError("order must be 2 or 4")
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn()
        flat[i] = orig - eps
        down = fn()
        if order == 2:
            g[i] = (up - down) / (2.0 * eps)
        else:
            flat[i] = orig + 2 * eps
            up2 = fn()
            flat[i] = orig - 2 * eps
            down2 = fn()
            g[i] = (8.0 * (up - down) - (up2 - down2)) / (12.0 * eps)
        flat[i] = orig
    return out
