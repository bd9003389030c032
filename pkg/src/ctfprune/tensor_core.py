"""Dense 2-D float64 tensors with define-by-run reverse-mode autodiff.

Every value is a matrix.  Operations executed inside an active :class:`Tape`
on at least one gradient-carrying input are recorded; ``tape.backward(loss)``
walks the record in reverse and fills ``.grad`` on the leaves.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(square(w))
    >>> tape.backward(loss)
    >>> w.grad
    array([[2., 4.]])

Reductions use numpy's pairwise summation, which is deterministic for a given
shape, so replaying a tape on identical inputs yields bit-identical results.
"""

import numpy as np

from .errors import ContractError, DimensionError, InputError, NonFiniteError

_active = []


class Tensor:
    """A rows x cols float64 matrix, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        if arr.size == 0:
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def item(self):
        if self.data.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, other)

    __rmul__ = __mul__


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of the operations of one forward pass.

    Use as a context manager; nested tapes shadow outer ones.  A tape supports
    exactly one backward pass.
    """

    def __init__(self):
        self.nodes = []
        self._used = False

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def backward(self, loss):
        if not isinstance(loss, Tensor) or loss.shape != (1, 1):
            shape = getattr(loss, "shape", type(loss).__name__)
            raise ContractError(f"backward needs a 1x1 loss tensor, got {shape}")
        if self._used:
            raise ContractError("backward already ran on this tape; record a new forward pass")
        self._used = True
        if not loss.requires_grad:
            return
        grads = {id(loss): np.ones((1, 1))}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._node is None:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg
        if loss._node is None:
            loss.grad = np.ones((1, 1)) if loss.grad is None else loss.grad + 1.0


def backward(loss, tape):
    """Populate ``.grad`` of every leaf reachable from ``loss``."""
    tape.backward(loss)


def record(name, data, parents, backward_fn):
    """Wrap ``data`` as an op output and record it on the active tape.

    ``backward_fn(g)`` must return one gradient array (or None) per parent.
    Exposed so other modules can define fused ops with hand-written adjoints.
    """
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{name} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad and _active:
        node = _Node(out, parents, backward_fn)
        out._node = node
        _active[-1].nodes.append(node)
    elif out.requires_grad:
        # no tape: behave as a constant
        out.requires_grad = False
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(name, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


def matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def hadamard(a, b):
    _same_shape("hadamard", a, b)
    ad, bd = a.data, b.data
    return record("hadamard", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def add(a, b):
    _same_shape("add", a, b)
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape("sub", a, b)
    return record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def scale(a, s):
    s = float(s)
    return record("scale", a.data * s, (a,), lambda g: (g * s,))


def sub_scalar(a, s):
    s = float(s)
    return record("sub_scalar", a.data - s, (a,), lambda g: (g,))


def add_scalar(a, s):
    return sub_scalar(a, -float(s))


def square(a):
    ad = a.data
    return record("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


def sigmoid(a):
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a):
    y = np.tanh(a.data)
    return record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a):
    on = a.data > 0
    return record("relu", np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def absolute(a):
    sign = np.sign(a.data)
    return record("absolute", np.abs(a.data), (a,), lambda g: (g * sign,))


def transpose(a):
    return record("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, rows, cols):
    """Row-major reshape (the layout numpy uses for C-ordered arrays)."""
    if rows * cols != a.data.size:
        raise DimensionError(f"reshape: {a.shape} has {a.data.size} entries, not {rows}x{cols}")
    shape = a.shape
    return record("reshape", a.data.reshape(rows, cols).copy(), (a,), lambda g: (g.reshape(shape),))


def sum_all(a):
    shape = a.shape
    total = np.array([[a.data.sum()]])
    return record("sum_all", total, (a,), lambda g: (np.full(shape, g[0, 0]),))


def row_softmax(a):
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return record("row_softmax", y, (a,), back)


def log_softmax_rows(x):
    """Numerically stable log-softmax of a plain array, row by row."""
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under row-softmax(logits)."""
    labels = np.asarray(labels)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise InputError(f"cross_entropy: expected {batch} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise InputError(f"cross_entropy: labels must lie in [0, {classes})")
    labels = labels.astype(np.intp)
    logp = log_softmax_rows(logits.data)
    rows = np.arange(batch)
    loss = np.array([[-logp[rows, labels].mean()]])

    def back(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g[0, 0] / batch),)

    return record("cross_entropy", loss, (logits,), back)
