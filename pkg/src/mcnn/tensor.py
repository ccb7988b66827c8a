"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its parents and a backward rule on the output
tensor.  ``Tensor.backward`` orders the recorded graph topologically and
replays the rules in reverse.  The graph is confined to the thread that built
it; recording can be switched off with :func:`no_grad` for inference.

Broadcasting is deliberately narrow: a binary op accepts operands of equal
shape, or one operand whose shape is a trailing suffix of the other's (a bias
vector added over the last axis, or a scalar).  Masks are plain boolean numpy
arrays and never carry gradients.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, EmptySequenceError, LabelError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim > 0 and 0 in arr.shape:
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # construction -------------------------------------------------------

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t.name = None
        return t

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # autodiff -----------------------------------------------------------

    def backward(self) -> None:
        """Populate ``.grad`` on every requires-grad tensor reachable from this scalar.

        Gradients accumulate into existing ``.grad`` arrays, so callers reset
        parameters between optimisation steps.
        """
        if self.data.size != 1 or self.data.ndim > 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss is not connected to any tensor that requires grad")
        order = build_tape(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        owned: set[int] = set()
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if isinstance(pg, _IndexedGrad):
                    buf = grads.get(key)
                    if buf is None:
                        buf = np.zeros(parent.shape)
                    elif key not in owned:
                        buf = buf.copy()
                    owned.add(key)
                    pg.add_into(buf)
                    grads[key] = buf
                elif key in grads:
                    grads[key] = grads[key] + pg
                    owned.add(key)
                else:
                    grads[key] = pg

    # operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class _IndexedGrad:
    """Gradient that is nonzero only at ``index``; added in place to avoid dense copies."""

    __slots__ = ("index", "value", "basic")

    def __init__(self, index, value: np.ndarray, basic: bool):
        self.index = index
        self.value = value
        self.basic = basic

    def add_into(self, buf: np.ndarray) -> None:
        if self.basic:
            buf[self.index] += self.value
        else:
            np.add.at(buf, self.index, self.value)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None
               for p in parts)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def build_tape(root: Tensor) -> list[Tensor]:
    """Return the recorded graph under ``root`` in topological order (parents first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _record(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    out = Tensor._wrap(data)
    parents = tuple(parents)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape:
        return
    small, big = (a.shape, b.shape) if a.ndim <= b.ndim else (b.shape, a.shape)
    if len(small) == 0 or big[len(big) - len(small):] == small:
        return
    raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead > 0 else g


# elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _record(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")

    def backward(g):
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

    return _record(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch by name: ``add``/``mul`` take two operands, the activations one."""
    binary = {"add": add, "mul": mul, "sub": sub}
    unary = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu, "exp": exp}
    if op in binary:
        if len(operands) != 2:
            raise ContractError(f"{op} takes two operands")
        return binary[op](*operands)
    if op in unary:
        if len(operands) != 1:
            raise ContractError(f"{op} takes one operand")
        return unary[op](as_tensor(operands[0]))
    raise ContractError(f"unknown elementwise op {op!r}")


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b``; mask broadcasts numpy-style."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"where: operand shapes differ {a.shape} vs {b.shape}")
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return _record(np.where(m, a.data, b.data), (a, b),
                   lambda g: (np.where(m, g, 0.0), np.where(m, 0.0, g)))


# shape ops --------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def take(x: Tensor, index) -> Tensor:
    """Numpy indexing; repeated advanced indices accumulate gradient."""
    basic = _is_basic_index(index)
    return _record(np.array(x.data[index]), (x,),
                   lambda g: (_IndexedGrad(index, g, basic),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return np.split(g, cuts, axis=axis)

    return _record(data, tensors, backward)


def place_rows(x: Tensor, rows: np.ndarray, n: int) -> Tensor:
    """Scatter the rows of ``x`` into an ``n``-row zero tensor at positions ``rows``."""
    rows = np.asarray(rows, dtype=np.int64)
    out = np.zeros((n,) + x.shape[1:])
    out[rows] = x.data
    return _record(out, (x,), lambda g: (g[rows],))


# reductions -------------------------------------------------------------

def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(np.sum(x.data, axis=axis), (x,), backward)


def tmean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis) * (1.0 / float(count))


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``x[..., L, D]`` over the L axis, counting only positions where ``mask[..., L]``."""
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape[:-1]:
        raise DimensionError(f"mask shape {m.shape} does not match {x.shape[:-1]}")
    counts = m.sum(axis=-1)
    if np.any(counts == 0):
        raise EmptySequenceError("no valid positions to pool")
    w = m / counts[..., None]
    data = np.einsum("...l,...ld->...d", w, x.data)
    return _record(data, (x,), lambda g: (w[..., :, None] * g[..., None, :],))


# linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; ``a`` may carry leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape((-1,) + b.shape).sum(axis=0)
        return ga, gb

    return _record(a.data @ b.data, (a, b), backward)


# normalisation and losses ----------------------------------------------

def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; positions where ``mask`` is false get weight 0."""
    z = x.data
    if mask is not None:
        z = np.where(np.broadcast_to(mask, z.shape), z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gx = g * gain.data
        dx = inv / d * (d * gx - gx.sum(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        flat = (-1, d)
        return (dx, (g * xhat).reshape(flat).sum(axis=0), g.reshape(flat).sum(axis=0))

    return _record(xhat * gain.data + bias.data, (x, gain, bias), backward)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be batch x classes, got {logits.shape}")
    target = np.asarray(target, dtype=np.int64)
    n, c = logits.shape
    if target.shape != (n,):
        raise DimensionError(f"expected {n} targets, got shape {target.shape}")
    bad = np.flatnonzero((target < 0) | (target >= c))
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"row {i}: target {int(target[i])} outside [0, {c})")
    logp = log_softmax_np(logits.data)
    loss = -logp[np.arange(n), target].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), target] -= 1.0
        return (p * (g / n),)

    return _record(np.array(loss), (logits,), backward)
