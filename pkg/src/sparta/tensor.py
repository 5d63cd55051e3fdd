"""Dense float32 tensors with tape-based reverse-mode autodiff.

Operations are recorded on the innermost active :class:`Tape`. A tensor that is
not produced under a tape is treated as an immutable value.

    >>> x = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(matmul(x, Tensor([[3.0], [4.0]])))
    ...     tape.backward(loss)
    >>> x.grad.tolist()
    [[3.0, 4.0]]
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import DimensionError, NumericError, StateError, VocabularyError

_state = threading.local()

RMSNORM_EPS = 1e-6
NORM_FLOOR = 1e-8


def _dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily build tensors in ``dtype``. Only finite-difference oracles use float64."""
    prev = _dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=_dtype(), order="C")
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of operations. One backward pass per tape.

    ``trace`` lists every op name executed while the tape was active, whether
    or not it needed a gradient; it is how op-identical forwards are compared.
    """

    def __init__(self):
        self.nodes = []
        self.trace = []
        self._done = False
        self._needs = set()

    def __enter__(self):
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def _wants(self, t):
        return t.requires_grad or id(t) in self._needs

    def record(self, op, inputs, output, backward):
        self.trace.append(op)
        if backward is not None and any(self._wants(t) for t in inputs):
            self.nodes.append(_Node(op, inputs, output, backward))
            self._needs.add(id(output))

    def backward(self, loss):
        if self._done:
            raise StateError("backward already ran on this tape; start a new Tape")
        self._done = True
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not self._wants(t):
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t.requires_grad:
                    leaves[key] = t
        if loss.requires_grad:
            leaves[id(loss)] = loss
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
            t.grad = g if t.grad is None else t.grad + g


def _tape():
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def _emit(op, inputs, out, backward=None):
    t = Tensor(out)
    tape = _tape()
    if tape is not None:
        tape.record(op, inputs, t, backward)
    return t


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _suffix_ok(a, b):
    return a.shape == b.shape or (b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape)


def _reduce_to(g, shape):
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def matmul(a, b):
    """Matrix product over the last two axes; leading (batch) axes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2] or A.shape[:-2] != B.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {list(A.shape)} x {list(B.shape)}")

    def backward(g):
        return g @ np.swapaxes(B, -1, -2), np.swapaxes(A, -1, -2) @ g

    return _emit("matmul", (a, b), A @ B, backward)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if not _suffix_ok(a.data, b.data):
        raise DimensionError(f"add shape mismatch: {list(a.shape)} + {list(b.shape)}")
    sb = b.shape

    def backward(g):
        return g, _reduce_to(g, sb)

    return _emit("add", (a, b), a.data + b.data, backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if not _suffix_ok(a.data, b.data):
        raise DimensionError(f"mul shape mismatch: {list(a.shape)} * {list(b.shape)}")
    A, B = a.data, b.data

    def backward(g):
        return g * B, _reduce_to(g * A, B.shape)

    return _emit("mul", (a, b), A * B, backward)


def scale(a, c):
    a = as_tensor(a)
    c = a.data.dtype.type(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def sum_all(a):
    a = as_tensor(a)
    shape = a.shape
    return _emit("sum", (a,), np.asarray(a.data.sum(), dtype=a.data.dtype),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def silu(x):
    x = as_tensor(x)
    X = x.data
    sig = 1.0 / (1.0 + np.exp(-X))

    def backward(g):
        return (g * (sig * (1.0 + X * (1.0 - sig))),)

    return _emit("silu", (x,), X * sig, backward)


def rmsnorm(x, gain, eps=RMSNORM_EPS):
    """``x / sqrt(mean(x**2) + eps) * gain`` over the last axis."""
    x, gain = as_tensor(x), as_tensor(gain)
    X, G = x.data, gain.data
    if G.ndim != 1 or X.shape[-1] != G.shape[0]:
        raise DimensionError(f"rmsnorm shape mismatch: x {list(X.shape)}, gain {list(G.shape)}")
    r = 1.0 / np.sqrt(np.mean(X * X, axis=-1, keepdims=True) + X.dtype.type(eps))
    xhat = X * r

    def backward(g):
        dxhat = g * G
        dx = r * (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
        dgain = (g * xhat).reshape(-1, G.shape[0]).sum(axis=0)
        return dx, dgain

    return _emit("rmsnorm", (x, gain), xhat * G, backward)


def embedding_lookup(table, ids):
    """Rows of a 2-D ``table`` for an integer array ``ids`` of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    T = table.data
    if T.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {list(T.shape)}")
    if ids.size and (ids.min() < 0 or ids.max() >= T.shape[0]):
        raise VocabularyError(f"token id out of range [0, {T.shape[0]})")

    def backward(g):
        gt = np.zeros_like(T)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, T.shape[1]))
        return (gt,)

    return _emit("embedding", (table,), T[ids], backward)


def slice_rows(x, rows):
    """Select rows of a 2-D tensor (rows may repeat)."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    X = x.data
    if X.ndim != 2:
        raise DimensionError(f"slice_rows needs a 2-D tensor, got {list(X.shape)}")
    if rows.size and (rows.min() < 0 or rows.max() >= X.shape[0]):
        raise DimensionError(f"row index out of range for shape {list(X.shape)}")

    def backward(g):
        gx = np.zeros_like(X)
        np.add.at(gx, rows, g)
        return (gx,)

    return _emit("slice_rows", (x,), X[rows], backward)


def repeat_axis(x, repeats, axis):
    """``np.repeat`` along one axis; used to share key/value heads across query heads."""
    x = as_tensor(x)
    X = x.data
    shape = X.shape

    def backward(g):
        new_shape = shape[:axis] + (shape[axis], repeats) + shape[axis + 1:]
        return (g.reshape(new_shape).sum(axis=axis + 1),)

    return _emit("repeat", (x,), np.repeat(X, repeats, axis=axis), backward)


def transpose(x, axes=None):
    """Explicit axis permutation (materialized copy). Default swaps the last two axes."""
    x = as_tensor(x)
    X = x.data
    if axes is None:
        axes = tuple(range(X.ndim - 2)) + (X.ndim - 1, X.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(X.ndim)):
        raise DimensionError(f"bad permutation {axes} for shape {list(X.shape)}")
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (x,), np.ascontiguousarray(X.transpose(axes)),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {list(old)} to {list(shape)}") from exc
    return _emit("reshape", (x,), out, lambda g: (g.reshape(old),))


def softmax(x, mask=None):
    """Softmax over the last axis. ``mask`` (bool, broadcastable) marks allowed entries."""
    x = as_tensor(x)
    X = x.data
    if mask is not None:
        X = np.where(mask, X, X.dtype.type(-np.inf))
    z = X - X.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), y, backward)


def dropout(x, p, rng):
    """Inverted dropout with keep probability ``1 - p``; identity when ``p == 0``."""
    x = as_tensor(x)
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1.0 - p)
    return _emit("dropout", (x,), x.data * keep, lambda g: (g * keep,))


def column_normalize_scale(v, magnitude, floor=NORM_FLOOR):
    """``magnitude[j] * v[:, j] / ||v[:, j]||`` for every column ``j``."""
    v, magnitude = as_tensor(v), as_tensor(magnitude)
    V, M = v.data, magnitude.data
    if V.ndim != 2 or M.shape != (V.shape[1],):
        raise DimensionError(f"column scale shape mismatch: {list(V.shape)} vs {list(M.shape)}")
    norms = column_norms(V)
    if np.any(norms < floor):
        raise NumericError(f"column norm below {floor}; direction undefined")
    u = V / norms
    ratio = M / norms

    def backward(g):
        ug = (u * g).sum(axis=0)
        return ratio * (g - u * ug), ug

    # V * (M / norms) is exactly V when M holds these same norms
    return _emit("colnorm_scale", (v, magnitude), V * ratio, backward)


def column_norms(a):
    """Euclidean norm of each column of a 2-D array, in the array's dtype."""
    a = np.asarray(a)
    return np.sqrt((a * a).sum(axis=0))


def softmax_crossentropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    L = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    if L.ndim != 2 or labels.shape != (L.shape[0],):
        raise DimensionError(f"logits {list(L.shape)} do not match labels {list(labels.shape)}")
    c = L.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    z = L - L.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    batch = L.shape[0]
    nll = lse - z[np.arange(batch), labels]
    loss = np.asarray(nll.mean(), dtype=L.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(batch), labels] -= 1.0
        return (p * (g / batch),)

    return _emit("softmax_xent", (logits,), loss, backward)
