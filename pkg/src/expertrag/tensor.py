"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op that involves a gradient-tracking input records a node holding its
inputs and a local gradient rule.  Nodes receive a monotonically increasing
tape index at creation, so the reverse of tape order is always a valid
reverse-topological order for :func:`backward`.

Only the op set the model needs is provided; broadcasting follows numpy rules
for the elementwise ops and is reduced back to the input shape on the way down.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from . import instrument
from .errors import ContractError, ShapeError

_tape_index = itertools.count()
_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_index", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._index = next(_tape_index)
        self.name = name

    # -- basic accessors -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        raise TypeError("use take/slice_rows/slice_cols/gather for indexing")

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._index = next(_tape_index)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    if not np.all(np.isfinite(a.data)):
        raise ContractError("sigmoid: non-finite input")
    y = _stable_sigmoid(np.atleast_1d(a.data)).reshape(a.shape)
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),))


def rsqrt(a: Tensor) -> Tensor:
    """Elementwise 1 / sqrt(a) for strictly positive input."""
    if not np.all(a.data > 0):
        raise ContractError("rsqrt: input must be strictly positive")
    y = 1.0 / np.sqrt(a.data)
    return _node(y, (a,), lambda g: (-0.5 * g * y**3,))


def ste(p: Tensor, hard) -> Tensor:
    """Straight-through: forward value ``hard``, backward identity to ``p``."""
    hard = np.broadcast_to(np.asarray(hard, dtype=np.float64), p.shape).copy()
    return _node(hard, (p,), lambda g: (g,))


# -- linear algebra ------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    m, k = a.shape
    n = b.shape[1]
    instrument.record_macs(m * k * n)
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}")
    src = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), rule)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError(f"mean over empty axis of shape {a.shape}")
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- normalisation -------------------------------------------------------
def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis (a vector, or each row of a matrix)."""
    if a.size == 0 or a.shape[-1] == 0:
        raise ShapeError(f"softmax of empty tensor with shape {a.shape}")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _node(y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise standardisation (no affine part)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def rule(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _node(xhat, (a,), rule)


# -- indexing ------------------------------------------------------------
def take(table: Tensor, rows) -> Tensor:
    """Row gather ``table[rows]``; this is also the embedding lookup."""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    if table.ndim != 2:
        raise ShapeError(f"take needs a matrix, got shape {table.shape}")
    if rows.size and (rows.min() < 0 or rows.max() >= table.shape[0]):
        raise ShapeError(f"take: row index out of range for shape {table.shape}")
    n = table.shape[0]

    def rule(g):
        out = np.zeros((n, g.shape[1]))
        np.add.at(out, rows, g)
        return (out,)

    return _node(table.data[rows], (table,), rule)


embedding = take


def gather(a: Tensor, rows, cols) -> Tensor:
    """Element gather ``a[rows[i], cols[i]]`` returning a vector."""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    cols = np.asarray(cols, dtype=np.int64).reshape(-1)
    if rows.shape != cols.shape:
        raise ShapeError(f"gather: index shapes {rows.shape} and {cols.shape} differ")
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _node(a.data[rows, cols], (a,), rule)


def scatter_rows(a: Tensor, rows, n_rows: int) -> Tensor:
    """Inverse of :func:`take`: ``out[rows[i]] += a[i]`` into ``n_rows`` rows."""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    if a.ndim != 2 or rows.size != a.shape[0]:
        raise ShapeError(f"scatter_rows: {rows.size} indices for shape {a.shape}")
    out = np.zeros((n_rows, a.shape[1]))
    np.add.at(out, rows, a.data)
    return _node(out, (a,), lambda g: (g[rows],))


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    src = a.shape

    def rule(g):
        out = np.zeros(src)
        out[start:stop] = g
        return (out,)

    return _node(a.data[start:stop].copy(), (a,), rule)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"slice_cols needs a matrix, got shape {a.shape}")
    src = a.shape

    def rule(g):
        out = np.zeros(src)
        out[:, start:stop] = g
        return (out,)

    return _node(a.data[:, start:stop].copy(), (a,), rule)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        shapes = ", ".join(str(p.shape) for p in parts)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def rule(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts))
        )

    return _node(data, parts, rule)


# -- losses --------------------------------------------------------------
def nll_rows(logits: Tensor, targets) -> Tensor:
    """Per-row negative log-likelihood ``-log softmax(logits)[t]``."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or targets.size != logits.shape[0]:
        raise ShapeError(f"nll_rows: {targets.size} targets for logits {logits.shape}")
    x = logits.data
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    idx = np.arange(targets.size)
    nll = lse - z[idx, targets]

    def rule(g):
        p = np.exp(z - lse[:, None])
        p[idx, targets] -= 1.0
        return (p * g[:, None],)

    return _node(nll, (logits,), rule)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood over the rows where ``mask`` is set."""
    n = logits.shape[0]
    mask = np.ones(n) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
    if mask.size != n:
        raise ShapeError(f"cross_entropy: mask of length {mask.size} for {n} rows")
    count = mask.sum()
    if count <= 0:
        raise ContractError("cross_entropy: every position is masked out")
    return sum(mul(nll_rows(logits, targets), mask / count))


# -- reverse pass --------------------------------------------------------
def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any requires_grad tensor")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._index in nodes or not t.requires_grad:
            continue
        nodes[t._index] = t
        stack.extend(t._parents)

    grads: dict[int, np.ndarray] = {loss._index: np.ones_like(loss.data)}
    for idx in sorted(nodes, reverse=True):
        t = nodes[idx]
        g = grads.pop(idx, None)
        if g is None:
            continue
        if t._backward is None:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if not parent.requires_grad:
                continue
            prev = grads.get(parent._index)
            grads[parent._index] = pg if prev is None else prev + pg
