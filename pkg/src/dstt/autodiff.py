"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable operation returns a :class:`Tensor` that records its
parents and a local backward rule. :func:`backward` walks the recorded tape in
reverse topological order and accumulates gradients into ``Tensor.grad``.

Binary operations require equal shapes; the only implicit broadcast allowed is
a scalar combined with a tensor. Anything else goes through an explicit op
(:func:`linear`, :func:`broadcast_to`) so each gradient rule stays auditable.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    NumericDomainError,
    TrainingDivergenceError,
)

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense array that doubles as a node on the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")
    __array_priority__ = 1000  # keep ndarray <op> Tensor dispatching to Tensor

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def _not_scalar(t):
    raise ContractError(f"item() requires a single-element tensor, got shape {t.shape}")


class Parameter(Tensor):
    """A named, trainable leaf tensor (a model weight)."""

    __slots__ = ("id", "trainable")

    def __init__(self, id: str, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.id = id
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter({self.id!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericDomainError("non-finite value produced in forward pass")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0 or t.data.size == 1 and t.data.ndim <= 1


def _check_binary(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(grad: np.ndarray, t: Tensor) -> np.ndarray:
    if grad.shape == t.shape:
        return grad
    return np.asarray(grad.sum()).reshape(t.shape)


# --------------------------------------------------------------------------- binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")

    def bw(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")

    def bw(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")

    def bw(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")
    if np.any(b.data == 0):
        raise NumericDomainError("division by zero")

    def bw(g):
        return _reduce_to(g / b.data, a), _reduce_to(-g * a.data / b.data**2, b)

    return _result(a.data / b.data, (a, b), bw)


# ---------------------------------------------------------------------------- unary


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _np_sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data > 709.0):
        raise NumericDomainError("exp overflow: argument above 709")
    e = np.exp(a.data)
    return _result(e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericDomainError("log of non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.logaddexp(0.0, a.data), (a,), lambda g: (g * _np_sigmoid(a.data),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def detach(a) -> Tensor:
    return Tensor(as_tensor(a).data)


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "exp": exp, "log": log}
_BINARY = {"add": add, "mul": mul, "sub": sub}


def elementwise(op: str, *inputs) -> Tensor:
    """Dispatch a pointwise op by name: sigmoid, tanh, relu, exp, log, add, mul, sub."""
    if op in _UNARY:
        if len(inputs) != 1:
            raise ContractError(f"{op} takes one input, got {len(inputs)}")
        return _UNARY[op](inputs[0])
    if op in _BINARY:
        if len(inputs) != 2:
            raise ContractError(f"{op} takes two inputs, got {len(inputs)}")
        return _BINARY[op](*inputs)
    raise ContractError(f"unknown elementwise op {op!r}")


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """2-D matrix product ``a @ b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), bw)


def bmm(a, b) -> Tensor:
    """Batched matrix product over identical leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 3 or a.shape[:-2] != b.shape[:-2] or a.ndim != b.ndim or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"bmm: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _result(a.data @ b.data, (a, b), bw)


def linear(x, w, b=None) -> Tensor:
    """Affine map over the last axis: ``x[..., k] @ w[k, p] + b[p]``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1:] != w.shape[:1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    parents = [x, w]
    out = x.data @ w.data
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
        out = out + b.data
        parents.append(b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ w.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out, parents, bw)


# -------------------------------------------------------------------- shape plumbing


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _result(np.array(a.data[idx]), (a,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    try:
        out = np.concatenate([t.data for t in ts], axis=ax)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    return _result(out, ts, bw)


def broadcast_to(a, shape) -> Tensor:
    """Explicit broadcast; the gradient sums over the expanded axes."""
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {a.shape} to {tuple(shape)}") from None
    lead = len(shape) - a.ndim

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        keep = tuple(i for i, n in enumerate(a.shape) if n == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g,)

    return _result(out, (a,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), bw)


# --------------------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Parameter] | None = None) -> dict[str, np.ndarray]:
    """Propagate d(loss)/d(node) through the tape.

    Gradients accumulate into ``.grad`` of every leaf that requires them.
    Returns a mapping from parameter id to gradient; when ``params`` is given,
    parameters that the loss does not reach get an all-zero entry.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise ContractError("backward already ran on this graph; rebuild the forward pass")
    loss._consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    reached: dict[str, np.ndarray] = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
                if isinstance(node, Parameter):
                    reached[node.id] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
        # free the tape as we go
        node._parents = ()
        node._backward = None
    if params is None:
        return reached
    out = {}
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        out[p.id] = p.grad
    return out


# ------------------------------------------------------------------------ optimizer


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    for p in params:
        g = grads.get(p.id)
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for parameter {p.id!r}", param_id=p.id)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for p in params:
        if not p.trainable:
            continue
        g = grads.get(p.id)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {p.id!r} has shape {g.shape}, parameter {p.shape}")
        m = state.first_moment.get(p.id)
        v = state.second_moment.get(p.id)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[p.id] = m
        state.second_moment[p.id] = v
        p.data = p.data - state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
    return state


class Adam:
    def __init__(self, params: Sequence[Parameter], learning_rate=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = [p for p in params if p.trainable]
        self.state = AdamState(learning_rate, beta1, beta2, epsilon)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = {p.id: p.grad for p in self.params if p.grad is not None}
        adam_step(self.params, grads, self.state)


# ----------------------------------------------------------------------- sampling


def gaussian_reparam_sample(mu: Tensor, rho: Tensor, rng: np.random.Generator) -> Tensor:
    """Draw ``mu + softplus(rho) * eps`` with ``eps ~ N(0, 1)`` kept on the tape."""
    if mu.shape != rho.shape:
        raise DimensionError(f"mu {mu.shape} and rho {rho.shape} differ")
    eps = rng.standard_normal(mu.shape)
    return add(mu, mul(softplus(rho), Tensor(eps)))
