"""Dense float64 tensors with eager reverse-mode differentiation.

Every operation records its parents and a closure mapping the output
gradient to parent gradients. ``Tensor.backward`` builds a :class:`Tape`
(reverse topological order) from the loss and replays it once.

Broadcasting follows numpy; gradients are summed back to the operand shape.
"""

from __future__ import annotations

import contextlib
import math
import threading

import numpy as np
from scipy.special import ndtr

from .errors import DimensionError, NumericError

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate operations without recording them."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _check_finite(data, op):
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite value produced by {op}")


class Tensor:
    """A float64 array, optionally a node of the differentiation graph.

    Leaves created with ``requires_grad=True`` own a ``grad`` buffer of the
    same shape (zeros until a backward pass accumulates into it).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_released")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Tensor()")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._released = False

    @classmethod
    def _node(cls, data, parents, backward, op):
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        out._released = False
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # -- introspection -------------------------------------------------
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
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op})"

    # -- differentiation -----------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        The graph is released afterwards; a second call raises.
        """
        if self.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._released:
            raise RuntimeError("backward already ran on this graph; recompute the forward pass")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor requiring grad")
        Tape.from_root(self).replay(np.ones_like(self.data))

    # -- operator sugar ------------------------------------------------
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
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Reverse topological order of the nodes a root depends on."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            if node._released:
                raise RuntimeError("graph was released by an earlier backward pass")
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        order.reverse()
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def replay(self, seed_grad):
        grads = {id(self.nodes[0]): seed_grad}
        for node in self.nodes:
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None and node.grad is not None:
                    node.grad += g
                continue
            if g is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._parents = ()
            node._backward = None
            node._released = True


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise -------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._node(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._node(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    """Elementwise (Hadamard) product."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._node(ad * bd, (a, b),
                        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                        "mul")


hadamard = mul


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    return Tensor._node(ad / bd, (a, b),
                        lambda g: (_unbroadcast(g / bd, ad.shape),
                                   _unbroadcast(-g * ad / (bd * bd), bd.shape)),
                        "div")


def scale(a, c):
    c = float(c)
    return Tensor._node(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a):
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._node(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = ndtr(x)
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return Tensor._node(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),), "gelu")


def exp(a):
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return Tensor._node(y, (a,), lambda g: (g * y,), "exp")


def log(a):
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return Tensor._node(y, (a,), lambda g: (g / x,), "log")


def where(mask, a, fill=0.0):
    """Select ``a`` where ``mask`` is true, ``fill`` elsewhere.

    Unselected entries never influence the result or the gradient, even
    when they hold garbage.
    """
    mask = np.asarray(mask, dtype=bool)
    y = np.where(mask, a.data, fill)
    shape = a.shape
    return Tensor._node(y, (a,), lambda g: (_unbroadcast(np.where(mask, g, 0.0), shape),), "where")


# -- structural --------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._node(ad @ bd, (a, b), backward, "matmul")


def transpose(a):
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError("transpose needs at least 2 axes")
    return Tensor._node(np.swapaxes(a.data, -1, -2), (a,),
                        lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def permute(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._node(np.transpose(a.data, axes), (a,),
                        lambda g: (np.transpose(g, inv),), "permute")


def reshape(a, shape):
    shape = tuple(shape)
    orig = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {orig} to {shape}") from None
    return Tensor._node(y, (a,), lambda g: (g.reshape(orig),), "reshape")


def expand(a, shape):
    """Broadcast ``a`` to ``shape`` (materialised copy)."""
    shape = tuple(shape)
    orig = a.shape
    try:
        y = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise DimensionError(f"cannot expand {orig} to {shape}") from None
    return Tensor._node(y, (a,), lambda g: (_unbroadcast(g, orig),), "expand")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._node(y, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def concat_rows(tensors):
    return concat(tensors, axis=-2)


def index_rows(a, idx):
    """Gather along axis 0."""
    idx = np.asarray(idx)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._node(a.data[idx], (a,), backward, "index_rows")


# -- reductions --------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    shape = a.shape
    y = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._node(np.asarray(y), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def sum_rows(a):
    """Sum over the row axis: [[1,2],[3,4]] -> [4,6]."""
    return sum_(a, axis=-2)


def max_(a, axis=-1):
    """Maximum along ``axis``; the gradient flows to the first maximiser."""
    x = a.data
    idx = np.expand_dims(np.argmax(x, axis=axis), axis)
    y = np.take_along_axis(x, idx, axis=axis).squeeze(axis)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return Tensor._node(y, (a,), backward, "max")


# -- normalisations ----------------------------------------------------

def softmax(a, axis=-1, mask=None):
    """Softmax along ``axis`` with row-max subtraction.

    ``mask`` (broadcastable, True = keep) zeroes excluded entries; every
    slice must keep at least one entry.
    """
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    s = e / np.sum(e, axis=axis, keepdims=True)
    return Tensor._node(s, (a,),
                        lambda g: (s * (g - np.sum(g * s, axis=axis, keepdims=True)),),
                        "softmax")


def softmax_rows(a):
    return softmax(a, axis=-1)


def log_softmax(a, axis=-1):
    x = a.data
    shifted = x - np.max(x, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse
    s = np.exp(y)
    return Tensor._node(y, (a,),
                        lambda g: (g - s * np.sum(g, axis=axis, keepdims=True),),
                        "log_softmax")


LN_EPS = 1e-5


def layer_norm(x, gain, bias, eps=LN_EPS):
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm needs a last axis of size >= 2")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine params must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    y = xhat * gd + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._node(y, (x, gain, bias), backward, "layer_norm")


def dot(a, b):
    """Inner product of two same-shape tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"dot: shapes differ {a.shape} vs {b.shape}")
    # via matmul so a 1x1 score matrix and a dot product round identically
    flat = (1, a.size)
    return reshape(matmul(reshape(a, flat), transpose(reshape(b, flat))), ())
