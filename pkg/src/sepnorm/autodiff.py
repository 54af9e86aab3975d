"""Dense float64 tensors with tape-style reverse-mode differentiation.

Every op allocates a new node with a monotonically increasing ``node_id``.
Because parents always exist before their children, sorting the nodes
reachable from a loss by descending id is a valid reverse topological order,
so no explicit graph object has to be threaded through the model code.

Broadcasting rule (deliberately narrow):

* identical shapes;
* one operand holds a single element (a scalar);
* one-sided expansion: the smaller operand, left-padded with unit extents,
  matches the larger one in every axis where its extent is not 1. This covers
  per-feature vectors (``[d]`` against ``[..., d]``) and keepdims reductions
  (``[..., 1]`` against ``[..., d]``). The result always has the larger
  operand's shape; two-sided expansion is rejected.
"""
from __future__ import annotations

import itertools
import logging
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

GELU_C = math.sqrt(2.0 / math.pi)  # 0.7978845608028654

_ids = itertools.count()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class _Debug:
    enabled = False
    warnings = 0


def debug_warnings() -> int:
    return _Debug.warnings


@contextmanager
def debug_mode():
    """Count domain warnings (NaN production) and assert on NaN inputs."""
    prev = _Debug.enabled
    _Debug.enabled = True
    _Debug.warnings = 0
    try:
        yield
    finally:
        _Debug.enabled = prev


def _domain_check(bad: np.ndarray, what: str) -> None:
    if _Debug.enabled and np.any(bad):
        _Debug.warnings += 1
        logger.warning("%s: %d invalid entries produce NaN", what, int(np.count_nonzero(bad)))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_ids)
    out.name = None
    req = False
    for p in parents:
        if p.requires_grad:
            req = True
            break
    out.requires_grad = req
    if req:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    for big, small in ((a, b), (b, a)):
        if len(small) <= len(big):
            padded = (1,) * (len(big) - len(small)) + tuple(small)
            if all(s == g or s == 1 for s, g in zip(padded, big)):
                return tuple(big)
    raise DimensionError(f"cannot broadcast shapes {a} and {b}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(b)
    if a.data.shape != b.data.shape:
        _broadcast_shape(a.data.shape, b.data.shape)
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data
    _domain_check(bd == 0, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape))
    return _node(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    _domain_check(a.data < 0, "sqrt")
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g * 0.5 / out,)
    return _node(out, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    _domain_check(ad <= 0, "log")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(np.where(ad < 0, np.nan, ad))

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g / ad,)
    return _node(out, (a,), bw)


def gelu(a) -> Tensor:
    """Tanh-approximate GELU: 0.5 x (1 + tanh(c (x + 0.044715 x^3))), c = sqrt(2/pi)."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)
    return _node(out, (a,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy stacking semantics; b may be 2-D and shared across a's batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb
    return _node(ad @ bd, (a, b), bw)


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(out)


def _count(shape, axes) -> int:
    n = math.prod(shape[ax] for ax in axes)
    if n == 0:
        raise ContractError("reduction over a zero-extent axis")
    return n


def _expand_grad(g, shape, axes, keepdims):
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    return _node(x.data.sum(axis=axes, keepdims=keepdims), (x,),
                 lambda g: (_expand_grad(g, shape, axes, keepdims),))


def reduce_mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = _count(x.shape, axes)
    shape = x.shape
    return _node(x.data.sum(axis=axes, keepdims=keepdims) * (1.0 / n), (x,),
                 lambda g: (_expand_grad(g, shape, axes, keepdims) / n,))


def reduce_var(x, axis=None, keepdims=False) -> Tensor:
    """Population (divide-by-count) variance."""
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = _count(x.shape, axes)
    centered = x.data - x.data.sum(axis=axes, keepdims=True) * (1.0 / n)
    out = (centered * centered).sum(axis=axes, keepdims=keepdims) * (1.0 / n)
    shape = x.shape
    return _node(out, (x,),
                 lambda g: (_expand_grad(g, shape, axes, keepdims) * (2.0 / n) * centered,))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if _Debug.enabled:
        assert not np.isnan(x.data).any(), "softmax received NaN input"
    ax = _norm_axis(axis, x.ndim)[0]
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)
    return _node(out, (x,), bw)


# ---------------------------------------------------------------- shape ops

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=()) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, idx) -> Tensor:
    """Basic (slice/int) indexing."""
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)
    return _node(x.data[idx], (x,), bw)


def concat(xs: Iterable, axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    ax = _norm_axis(axis, xs[0].ndim)[0]
    splits = np.cumsum([t.shape[ax] for t in xs])[:-1]
    return _node(np.concatenate([t.data for t in xs], axis=ax), tuple(xs),
                 lambda g: tuple(np.split(g, splits, axis=ax)))


def take_rows(x, idx: np.ndarray) -> Tensor:
    """Per-sequence gather: x [B, L, ...], idx [B, K] int -> [B, K, ...]."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise DimensionError(f"take_rows index shape {idx.shape} does not fit {x.shape}")
    rows = np.arange(x.shape[0])[:, None]
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, (rows, idx), g)
        return (full,)
    return _node(x.data[rows, idx], (x,), bw)


def lookup(table, idx: np.ndarray) -> Tensor:
    """Rows of a [N, d] table at integer positions ``idx`` (any shape) -> idx.shape + [d]."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    n, d = table.shape
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DimensionError(f"lookup index out of range for table of {n} rows")

    def bw(g):
        full = np.zeros((n, d))
        np.add.at(full, idx.reshape(-1), g.reshape(-1, d))
        return (full,)
    return _node(table.data[idx], (table,), bw)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    _broadcast_shape(tuple(shape), x.shape)
    old = x.shape
    return _node(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),))


# ---------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in seen:
            continue
        seen.add(t.node_id)
        order.append(t)
        stack.extend(p for p in t._parents if p.requires_grad)
    order.sort(key=lambda t: t.node_id, reverse=True)

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    for t in order:
        g = grads.pop(t.node_id, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(p.node_id)
            grads[p.node_id] = pg if prev is None else prev + pg
