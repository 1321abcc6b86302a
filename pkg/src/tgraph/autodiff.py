"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
backward rule mapping the upstream gradient to one gradient per parent.  The
tape is dynamic: :func:`backward` rebuilds the topological order from the loss
on each call, so graphs and batch shapes may change every step.

Only the operator set needed by the TGraph network is provided.
"""

from __future__ import annotations

import numpy as np
from scipy import special

from .errors import NumericError

__all__ = [
    "Tensor", "tensor", "constant", "backward", "tape",
    "add", "sub", "mul", "neg", "matmul", "concat", "reshape", "expand",
    "gather_rows", "segment_sum", "sum", "mean", "exp",
    "l2_normalize", "instance_norm", "gelu", "relu", "sigmoid", "softmax",
    "embedding_lookup",
]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A node of the autodiff graph.

    ``data`` is always a float64 ndarray.  ``grad`` is only populated on leaves
    (tensors created directly with ``requires_grad=True``) by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, *, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def item(self):
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def constant(data):
    return data if isinstance(data, Tensor) else Tensor(data)


def _make(op, data, parents, backward_fn):
    # a single reduction propagates any nan/inf
    if not np.isfinite(np.add.reduce(data, axis=None)):
        raise NumericError(f"{op}: non-finite values in forward pass")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def tape(loss):
    """Return the operations reachable from ``loss`` in topological order."""
    order, seen = [], set()
    stack = [(loss, False)]
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- elementwise arithmetic -------------------------------------------------

def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b):
    a, b = constant(a), constant(b)
    _broadcast_check("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = constant(a), constant(b)
    _broadcast_check("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def neg(a):
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = constant(a), constant(b)
    _broadcast_check("mul", a, b)

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", a.data * b.data, (a, b), back)


def exp(a):
    with np.errstate(over="ignore"):  # overflow is reported by _make
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


# -- linear algebra and shape -----------------------------------------------

def matmul(a, b):
    """``a @ b`` with numpy stacking semantics.

    Inputs with leading (batch) dimensions are multiplied one matrix at a time,
    which keeps each batch item's result independent of its position.
    """
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, m = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make("matmul", np.matmul(a.data, b.data), (a, b), back)


def concat(tensors, axis=-1):
    tensors = [constant(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ValueError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    lead = (slice(None),) * ax

    def back(g):
        return tuple(g[lead + (slice(bounds[i], bounds[i + 1]),)] if t.requires_grad else None
                     for i, t in enumerate(tensors))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, back)


def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def expand(a, shape):
    """Broadcast ``a`` to ``shape`` (materialised copy)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ValueError(f"expand: cannot broadcast {a.shape} to {shape}") from None
    return _make("expand", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def _one_hot(ids, n):
    m = np.zeros((n, ids.shape[0]))
    m[ids, np.arange(ids.shape[0])] = 1.0
    return m


def _segment_sum_np(values, ids, n, axis):
    values = np.moveaxis(values, axis, -2) if values.ndim > 1 else values
    out = np.matmul(_one_hot(ids, n), values)
    return np.moveaxis(out, -2, axis) if values.ndim > 1 else out


def gather_rows(x, indices, axis=0):
    """Select slices ``indices`` along ``axis`` (repeats allowed)."""
    indices = np.asarray(indices, dtype=np.int64)
    n = x.shape[axis]
    if indices.ndim != 1 or (indices.size and (indices.min() < 0 or indices.max() >= n)):
        raise ValueError(f"gather_rows: indices out of range for axis of length {n}")
    return _make("gather_rows", np.take(x.data, indices, axis=axis), (x,),
                 lambda g: (_segment_sum_np(g, indices, n, axis),))


def segment_sum(values, segment_ids, n_segments, axis=0):
    """Sum slices of ``values`` along ``axis`` into ``n_segments`` buckets."""
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if segment_ids.shape != (values.shape[axis],):
        raise ValueError(f"segment_sum: {segment_ids.shape[0] if segment_ids.ndim else 0} ids for "
                         f"axis of length {values.shape[axis]}")
    if segment_ids.size and (segment_ids.min() < 0 or segment_ids.max() >= n_segments):
        raise ValueError(f"segment_sum: segment ids outside [0, {n_segments})")
    return _make("segment_sum", _segment_sum_np(values.data, segment_ids, n_segments, axis),
                 (values,), lambda g: (np.take(g, segment_ids, axis=axis),))


# -- reductions -------------------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", out, (a,), back)


def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make("mean", out, (a,), back)


# -- normalisation ----------------------------------------------------------

def l2_normalize(a, axis=-1, eps=1e-12):
    """``a / max(||a||, eps)`` along ``axis``; zero vectors stay zero."""
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    guarded = norm <= eps
    denom = np.where(guarded, eps, norm)
    out = a.data / denom

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(guarded, g / eps, (g - out * dot) / denom),)

    return _make("l2_normalize", out, (a,), back)


def instance_norm(x, weight, bias, axis=1, eps=1e-5):
    """Normalise ``x`` to zero mean / unit variance along ``axis``.

    ``weight`` and ``bias`` are per-channel (last axis) affine parameters.
    """
    if weight.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ValueError(f"instance_norm: affine shapes {weight.shape}, {bias.shape} "
                         f"do not match channels of {x.shape}")
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=axis, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * weight.data + bias.data
    reduce_axes = tuple(range(x.ndim - 1))

    def back(g):
        gw = (g * xhat).sum(axis=reduce_axes) if weight.requires_grad else None
        gb = g.sum(axis=reduce_axes) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * weight.data
            gx = inv * (gh - gh.mean(axis=axis, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=axis, keepdims=True))
        return gx, gw, gb

    return _make("instance_norm", out, (x, weight, bias), back)


# -- activations ------------------------------------------------------------

def gelu(a):
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + special.erf(a.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
    return _make("gelu", a.data * cdf, (a,), lambda g: (g * (cdf + a.data * pdf),))


def relu(a):
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a):
    out = special.expit(a.data)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a, axis=-1, temperature=None):
    """Softmax of ``a / temperature`` along ``axis``.

    ``temperature`` may be a float or a scalar Tensor (then it is differentiated
    too).  The normaliser is summed in sorted order so the result does not
    depend on the order of elements along ``axis``.
    """
    temp = constant(1.0 if temperature is None else temperature)
    if temp.data.size != 1:
        raise ValueError(f"softmax: temperature must be scalar, got shape {temp.shape}")
    t = float(temp.data.reshape(()))
    z = a.data / t
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    out = e / np.sort(e, axis=axis).sum(axis=axis, keepdims=True)

    def back(g):
        gz = out * (g - (g * out).sum(axis=axis, keepdims=True))
        ga = gz / t if a.requires_grad else None
        gt = None
        if temp.requires_grad:
            gt = np.reshape(-(gz * z).sum() / t, temp.shape)
        return ga, gt

    return _make("softmax", out, (a, temp), back)


def embedding_lookup(table, indices):
    """Rows of ``table`` at integer ``indices`` (any shape); output ``indices.shape + (dim,)``."""
    indices = np.asarray(indices, dtype=np.int64)
    n, dim = table.shape
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        raise ValueError(f"embedding_lookup: indices outside [0, {n})")
    flat = indices.ravel()

    def back(g):
        g = g.reshape(-1, dim)
        return (np.stack([np.bincount(flat, weights=g[:, c], minlength=n) for c in range(dim)], axis=1),)

    return _make("embedding_lookup", table.data[indices], (table,), back)
