"""Dense n-d tensors with tape-based reverse-mode differentiation.

Every op produces a new :class:`Tensor` holding its value, the tensors it
was computed from and a closure mapping the output gradient to input
gradients.  When a :class:`Tape` is active, op outputs are also appended to
it in execution order, which is a valid topological order for the reverse
sweep.
"""
from __future__ import annotations

import threading

import numpy as np

from ..errors import ContractError, NumericsError, ShapeError

_local = threading.local()


def _tapes():
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


class Tape:
    """Records op applications made while active (``with Tape() as tape:``)."""

    def __init__(self):
        self.nodes = []
        self._ids = set()

    def record(self, node):
        self.nodes.append(node)
        self._ids.add(id(node))

    def __contains__(self, node):
        return id(node) in self._ids

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().remove(self)
        return False

    def backward(self, loss):
        backward(loss, self)


class IndexedGrad:
    """Gradient that is zero except on ``index``; avoids materialising it."""

    __slots__ = ("index", "value", "advanced")

    def __init__(self, index, value, advanced):
        self.index = index
        self.value = value
        self.advanced = advanced


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.op = "leaf"
        self.name = name

    # -- introspection -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def zero_grad(self):
        self.grad = None

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_const(other, self)))

    def __rsub__(self, other):
        return add(_const(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def make_node(data, parents, backward_fn, op) -> Tensor:
    """Wrap an op result, checking it is finite and recording it on active tapes."""
    if not np.isfinite(data).all():
        raise NumericsError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    else:
        out.parents = ()
        out.backward_fn = None
    for tape in _tapes():
        tape.record(out)
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise --------------------------------------------------------------

def add(a, b):
    a = _const(a, b) if not isinstance(a, Tensor) else a
    b = _const(b, a)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward, "add")


def mul(a, b):
    a = _const(a, b) if not isinstance(a, Tensor) else a
    b = _const(b, a)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), backward, "mul")


def neg(a):
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def reciprocal(a):
    out = 1.0 / a.data
    return make_node(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def exp(a):
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a):
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a):
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a):
    mask = a.data > 0
    return make_node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a):
    """GELU, tanh approximation (as in the reference BERT code)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return make_node(out.astype(x.dtype, copy=False), (a,), backward, "gelu")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_node(out, (a, b), backward, "matmul")


# -- reductions and shape -----------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    return make_node(
        np.asarray(a.data.sum(axis=axis, keepdims=keepdims)),
        (a,),
        lambda g: (_expand(g, a.shape, axis, keepdims),),
        "sum",
    )


def mean(a, axis=None, keepdims=False):
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.data.size // max(out.size, 1)
    return make_node(out, (a,), lambda g: (_expand(g / n, a.shape, axis, keepdims),), "mean")


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_node(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index):
    out = a.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(p, (np.ndarray, list)) for p in parts)
    return make_node(
        np.array(out) if advanced else out.copy(),
        (a,),
        lambda g: (IndexedGrad(index, g, advanced),),
        "getitem",
    )


def concat(tensors, axis=-1):
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(out, tensors, backward, "concat")


def stack(tensors, axis=0):
    tensors = list(tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: shapes {[t.shape for t in tensors]}") from None

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_node(out, tensors, backward, "stack")


# -- reverse sweep ------------------------------------------------------------

def _topological(loss):
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _accumulate_leaf(leaf, g):
    if isinstance(g, IndexedGrad):
        buf = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        _scatter(buf, g)
        leaf.grad = buf
    elif leaf.grad is None:
        leaf.grad = np.array(g, dtype=leaf.data.dtype)
    else:
        leaf.grad = leaf.grad + g


def _scatter(buf, g):
    if g.advanced:
        np.add.at(buf, g.index, g.value)
    else:
        buf[g.index] += g.value


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf
    with ``requires_grad``.  ``loss`` must hold a single value."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is not None:
        if loss not in tape:
            raise ContractError("loss was not recorded on the given tape")
        order = tape.nodes
    else:
        order = _topological(loss)
    if not loss.requires_grad:
        return
    if loss.backward_fn is None:
        _accumulate_leaf(loss, np.ones_like(loss.data))
        return

    grads = {id(loss): np.ones_like(loss.data)}
    owned = set()
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.backward_fn is None:
                _accumulate_leaf(parent, pg)
                continue
            key = id(parent)
            buf = grads.get(key)
            if isinstance(pg, IndexedGrad):
                if buf is None or key not in owned:
                    buf = np.zeros_like(parent.data) if buf is None else np.array(buf)
                    grads[key] = buf
                    owned.add(key)
                _scatter(buf, pg)
            elif buf is None:
                grads[key] = pg
            elif key in owned:
                buf += pg
            else:
                grads[key] = buf + pg
                owned.add(key)
