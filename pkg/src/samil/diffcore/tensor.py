"""Dense tensors with reverse-mode differentiation.

Only the primitives needed by the MIL models and contrastive losses are
provided. Every primitive records a closure that pushes the upstream
gradient into its inputs; :func:`backward` walks the graph once in reverse
topological order.

Bags of different sizes are batched by concatenating their instances along
axis 0 and passing ``offsets`` (start row of each bag, first entry 0).
The ``segment_*`` primitives reduce over those row groups.
"""

from __future__ import annotations

import numpy as np

from samil.errors import ContractError, DomainError, NonFiniteError, ShapeError

EPS = 1e-12


class Tensor:
    """A node in the computation graph.

    Leaves created with ``requires_grad=True`` accumulate gradients across
    backward passes; interior nodes get a fresh gradient on every pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, *, op="leaf", parents=(), backward_fn=None, name=None):
        data = np.asarray(data)
        if data.dtype.kind != "f":
            data = data.astype(np.float64)
        if not np.isfinite(data).all():
            raise NonFiniteError(f"non-finite values produced by {op!r}")
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, op="detach")

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(np.asarray(x, dtype=like.data.dtype))
    return Tensor(x)


def _pair(a, b):
    """Coerce two operands to tensors; bare constants adopt the other's dtype."""
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _node(data, op, parents, backward_fn):
    parents = tuple(p for p in parents if p.requires_grad)
    if not parents:
        return Tensor(data, op=op)
    return Tensor(data, True, op=op, parents=parents, backward_fn=backward_fn)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, "add", (a, b), fn)


def sub(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(a.data - b.data, "sub", (a, b), fn)


def mul(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, "mul", (a, b), fn)


def div(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _node(out, "div", (a, b), fn)


def tanh(x):
    out = np.tanh(x.data)

    def fn(g):
        x._accumulate(g * (1.0 - out * out))

    return _node(out, "tanh", (x,), fn)


def sigmoid(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def fn(g):
        x._accumulate(g * out * (1.0 - out))

    return _node(out, "sigmoid", (x,), fn)


def relu(x):
    mask = x.data > 0

    def fn(g):
        x._accumulate(g * mask)

    return _node(np.where(mask, x.data, 0.0).astype(x.data.dtype), "relu", (x,), fn)


def exp(x):
    out = np.exp(x.data)

    def fn(g):
        x._accumulate(g * out)

    return _node(out, "exp", (x,), fn)


def log(x, eps=EPS):
    """Natural log with the argument clamped below at ``eps``.

    The gradient is zero where the clamp is active.
    """
    clamped = np.maximum(x.data, eps)

    def fn(g):
        x._accumulate(np.where(x.data > eps, g / clamped, 0.0))

    return _node(np.log(clamped), "log", (x,), fn)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product of a 2-D ``a`` with a 2-D matrix or 1-D vector ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise ShapeError(f"matmul expects 2-D @ 1-D/2-D, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def fn(g):
        if b.ndim == 1:
            if a.requires_grad:
                a._accumulate(np.outer(g, b.data))
            if b.requires_grad:
                b._accumulate(a.data.T @ g)
        else:
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

    return _node(a.data @ b.data, "matmul", (a, b), fn)


def transpose(x):
    def fn(g):
        x._accumulate(g.T)

    return _node(x.data.T, "transpose", (x,), fn)


def reshape(x, shape):
    def fn(g):
        x._accumulate(g.reshape(x.shape))

    return _node(x.data.reshape(shape), "reshape", (x,), fn)


def take(x, index):
    """Basic or integer-array indexing; repeated indices accumulate."""

    def fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        x._accumulate(full)

    return _node(x.data[index], "take", (x,), fn)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, fn)


# ---------------------------------------------------------------- reductions


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _node(x.data.sum(axis=axis, keepdims=keepdims), "sum", (x,), fn)


def mean(x, axis=None):
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def logsumexp(x, axis=-1):
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)

    def fn(g):
        x._accumulate(np.expand_dims(g, axis) * e / s)

    return _node(out, "logsumexp", (x,), fn)


def log_softmax(x, axis=-1):
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def fn(g):
        x._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _node(out, "log_softmax", (x,), fn)


def softmax(x, axis=-1):
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _node(out, "softmax", (x,), fn)


def l2_normalize(x, axis=-1):
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, EPS)
    out = x.data / norm

    def fn(g):
        x._accumulate((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm)

    return _node(out, "l2_normalize", (x,), fn)


# ---------------------------------------------------------------- segments


def _segment_ids(offsets, n):
    offsets = np.asarray(offsets, dtype=np.intp)
    if offsets.ndim != 1 or offsets.size == 0 or offsets[0] != 0:
        raise ShapeError("offsets must be a non-empty 1-D array starting at 0")
    if np.any(np.diff(offsets) <= 0) or offsets[-1] >= n:
        raise ShapeError("every segment must be non-empty")
    ids = np.zeros(n, dtype=np.intp)
    ids[offsets[1:]] = 1
    return offsets, np.cumsum(ids)


def segment_sum(x, offsets):
    """Sum rows of ``x`` within each segment; output has one row per segment."""
    offsets, ids = _segment_ids(offsets, x.shape[0])

    def fn(g):
        x._accumulate(g[ids])

    return _node(np.add.reduceat(x.data, offsets, axis=0), "segment_sum", (x,), fn)


def broadcast_segments(x, offsets, n):
    """Repeat row ``s`` of ``x`` over every row of segment ``s``."""
    offsets, ids = _segment_ids(offsets, n)

    def fn(g):
        x._accumulate(np.add.reduceat(g, offsets, axis=0))

    return _node(x.data[ids], "broadcast_segments", (x,), fn)


def segment_softmax(x, offsets, temp=1.0):
    """Softmax of a 1-D vector independently inside each segment."""
    if temp <= 0:
        raise DomainError(f"temperature must be positive, got {temp}")
    if x.ndim != 1:
        raise ShapeError(f"segment_softmax expects a vector, got shape {x.shape}")
    offsets, ids = _segment_ids(offsets, x.shape[0])
    z = x.data / temp
    z = z - np.maximum.reduceat(z, offsets)[ids]
    e = np.exp(z)
    out = e / np.add.reduceat(e, offsets)[ids]

    def fn(g):
        inner = np.add.reduceat(g * out, offsets)[ids]
        x._accumulate(out * (g - inner) / temp)

    return _node(out, "segment_softmax", (x,), fn)


# ---------------------------------------------------------------- losses


def softmax_temp(logits, temp=1.0):
    """Temperature-scaled, max-shifted softmax of a vector."""
    logits = as_tensor(logits)
    if logits.ndim != 1 or logits.shape[0] == 0:
        raise ShapeError(f"softmax_temp expects a non-empty vector, got shape {logits.shape}")
    return segment_softmax(logits, [0], temp)


def kl_div(p, q, eps=EPS):
    """KL(p || q) = sum p log(p / q) with q clamped below at ``eps`` and 0 log 0 = 0.

    Both arguments may be tensors; the result is summed over all entries, so
    concatenated bags give the sum of their per-bag divergences.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_div shapes differ: {p.shape} vs {q.shape}")
    pos = p.data > 0
    qc = np.maximum(q.data, eps)
    safe_p = np.where(pos, p.data, 1.0)
    terms = np.where(pos, p.data * (np.log(safe_p) - np.log(qc)), 0.0)

    def fn(g):
        if p.requires_grad:
            p._accumulate(g * np.where(pos, np.log(safe_p) - np.log(qc) + 1.0, 0.0))
        if q.requires_grad:
            q._accumulate(g * np.where(q.data > eps, -p.data / qc, 0.0))

    # rounding can push a near-zero divergence fractionally below zero
    value = max(float(terms.sum()), 0.0)
    return _node(np.asarray(value, dtype=q.data.dtype), "kl_div", (p, q), fn)


# ---------------------------------------------------------------- graph traversal


def _topological_order(root):
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Propagate d(loss)/d(node) to every leaf that requires a gradient.

    Leaf gradients accumulate across calls; calling twice on the same graph
    yields exactly twice the gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        loss._accumulate(np.ones_like(loss.data))
        return
    order = _topological_order(loss)
    for node in order:
        if not node.is_leaf:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            continue
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
        node._backward(node.grad)
