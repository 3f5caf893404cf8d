"""Reverse-mode differentiation over dense float64 numpy arrays.

Every operation records its parents and a closure that maps the upstream
gradient to parent gradients.  Arrays may carry leading batch axes; the
per-sample semantics are those of 1-D / 2-D tensors and broadcasting is
undone on the way back.
"""
import math

import numpy as np

DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    pass


def _as_array(x):
    return np.asarray(x, dtype=DTYPE)


def _check_finite(value, op):
    # a dot with itself is one fast reduction; it is finite iff every entry is
    # (barring overflow of the sum, which the elementwise fallback settles)
    flat = value.reshape(-1)
    if math.isfinite(flat @ flat) or np.all(np.isfinite(flat)):
        return
    raise NonFiniteError(f"non-finite value produced by {op}")


class Tensor:
    """A value node in the recorded computation."""

    __slots__ = ("value", "grad", "name", "requires_grad", "_parents", "_backward", "_op")
    # make numpy defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, value, requires_grad=False, name=None, _parents=(), _backward=None, _op="leaf"):
        self.value = _as_array(value)
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.name = name
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        if _parents:
            _check_finite(self.value, _op)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self._op})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.value)


class Parameter(Tensor):
    """Trainable leaf whose gradient accumulates across backward calls."""

    __slots__ = ()

    def __init__(self, value, name=None):
        super().__init__(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        _check_finite(self.value, f"parameter {name}")
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


def zero_grads(params):
    for p in params:
        p.zero_grad()


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _node(value, parents, backward, op):
    return Tensor(value, _parents=tuple(parents), _backward=backward, _op=op)


def _broadcast_check(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.value + b.value, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.value - b.value, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _node(a.value * b.value, (a, b), backward, "mul")


def square(a):
    a = as_tensor(a)
    return _node(a.value * a.value, (a,), lambda g: (2.0 * a.value * g,), "square")


def sigmoid(a):
    a = as_tensor(a)
    # split branches keep exp() from overflowing
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


# ------------------------------------------------------------------ structure

def matmul(a, b):
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.value @ b.value, (a, b), backward, "matmul")


def transpose(a):
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 axes, got shape {a.shape}")
    return _node(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def getitem(a, key):
    """Basic or integer-array indexing; gradient scatters back into place."""
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.value)
        np.add.at(out, key, g)
        return (out,)

    return _node(a.value[key], (a,), backward, "getitem")


def reshape(a, shape):
    a = as_tensor(a)
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors, axis=-1):
    """Concatenate along ``axis`` (the column axis by default)."""
    tensors = [as_tensor(t) for t in tensors]
    value = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(value, tensors, backward, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    value = np.stack([t.value for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(value, tensors, backward, "stack")


def gather_rows(table, index):
    """Rows of a 2-D ``table`` selected by an integer array of any shape."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.intp)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got shape {table.shape}")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: index out of range for table with {table.shape[0]} rows")

    def backward(g):
        out = np.zeros_like(table.value)
        np.add.at(out, index.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _node(table.value[index], (table,), backward, "gather_rows")


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(value, (a,), backward, "sum")


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


# -------------------------------------------------------------------- masking

def _check_mask(x, mask, op):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        mask = np.broadcast_to(mask, x.shape) if _broadcastable(mask.shape, x.shape) else None
    if mask is None:
        raise ShapeError(f"{op}: mask shape does not match input shape {x.shape}")
    return mask


def _broadcastable(src, dst):
    try:
        return np.broadcast_shapes(src, dst) == tuple(dst)
    except ValueError:
        return False


def masked_softmax(x, mask):
    """Softmax over the last axis restricted to ``mask``; invalid slots get 0."""
    x = as_tensor(x)
    mask = _check_mask(x, mask, "masked_softmax")
    if not mask.any(axis=-1).all():
        raise ValueError("masked_softmax: a slice has no valid positions")
    shifted = np.where(mask, x.value, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (x,), backward, "masked_softmax")


def masked_max(x, mask, axis=-1, fill=None):
    """Max over ``axis`` ignoring invalid entries.

    Returns ``(values, argmax)``.  The gradient flows to the recorded argmax,
    the first maximal index on ties.  Slices without a valid entry raise
    unless ``fill`` is given, in which case they take that value, report
    argmax -1 and receive no gradient.
    """
    x = as_tensor(x)
    mask = _check_mask(x, mask, "masked_max")
    has_valid = mask.any(axis=axis)
    if fill is None and not has_valid.all():
        raise ValueError("masked_max: a slice has no valid positions")
    masked = np.where(mask, x.value, -np.inf)
    arg = np.argmax(masked, axis=axis)
    picked = np.take_along_axis(masked, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    values = np.where(has_valid, picked, 0.0 if fill is None else fill)
    arg = np.where(has_valid, arg, -1)

    def backward(g):
        out = np.zeros_like(x.value)
        gsel = np.where(has_valid, g, 0.0)
        np.put_along_axis(out, np.expand_dims(np.maximum(arg, 0), axis), np.expand_dims(gsel, axis), axis=axis)
        return (out,)

    return _node(values, (x,), backward, "masked_max"), arg


def masked_mean(x, mask, axis=-1, fill=None):
    """Mean over valid entries along ``axis``; same empty-slice rules as ``masked_max``."""
    x = as_tensor(x)
    mask = _check_mask(x, mask, "masked_mean")
    counts = mask.sum(axis=axis)
    if fill is None and not (counts > 0).all():
        raise ValueError("masked_mean: a slice has no valid positions")
    safe = np.maximum(counts, 1)
    weights = mask / np.expand_dims(safe, axis)
    values = np.where(counts > 0, (x.value * weights).sum(axis=axis), 0.0 if fill is None else fill)

    def backward(g):
        return (np.expand_dims(np.where(counts > 0, g, 0.0), axis) * weights,)

    return _node(values, (x,), backward, "masked_mean")


# ------------------------------------------------------------------- backward

def _topological_order(root):
    order, seen, stack_ = [], set(), [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(param) into ``grad`` of every reachable Parameter."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss._parents:
        raise RuntimeError("backward: no recorded computation (run a forward pass first)")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss does not depend on any Parameter")
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
            continue
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
