"""Dense tensors with reverse-mode automatic differentiation.

Storage is 32-bit by default; every reduction (dot products, sums, norms,
variances, softmax denominators) accumulates in 64-bit before the result is
cast back. Tensors may also be created as float64, in which case ops stay in
float64 end to end; the finite-difference oracle uses this mode.

The graph is a tape of closures: each op attaches the producing inputs and a
backward rule to its output. ``backward`` walks the reachable subgraph once in
reverse topological order and accumulates gradients additively on every
tensor that requires them.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional array of reals participating in the autodiff graph.

    Immutable after creation except for ``grad`` accumulation and explicit
    parameter updates performed by an optimizer between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else np.float32)
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _result_dtype(*tensors: Tensor):
    if any(t.data.dtype == np.float64 for t in tensors):
        return np.float64
    return np.float32


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable | None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and backward is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ops -------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    dt = _result_dtype(a, b)
    data = (a.data + b.data).astype(dt, copy=False)

    def backward(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    dt = _result_dtype(a, b)
    data = (a.data * b.data).astype(dt, copy=False)

    def backward(g):
        ga = _unbroadcast((g * b.data).astype(dt, copy=False), a.shape) if a.requires_grad else None
        gb = _unbroadcast((g * a.data).astype(dt, copy=False), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    dt = _result_dtype(a, b)
    data = (a.data / b.data).astype(dt, copy=False)

    def backward(g):
        ga = _unbroadcast((g / b.data).astype(dt, copy=False), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast((-g * a.data / (b.data * b.data)).astype(dt, copy=False), b.shape)
        return ga, gb

    return _make(data, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: ((g * data).astype(data.dtype, copy=False),))


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)
    return _make(data, (a,), lambda g: ((g * 0.5 / data).astype(data.dtype, copy=False),))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = erf(x * (1.0 / math.sqrt(2.0)))
    data = (0.5 * x * (1.0 + inner)).astype(x.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * x.astype(np.float64) ** 2) * (1.0 / math.sqrt(2.0 * math.pi))
        local = 0.5 * (1.0 + inner) + x * pdf
        return ((g * local).astype(x.dtype, copy=False),)

    return _make(data, (a,), backward)


# -- shape ops ---------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    data = np.ascontiguousarray(a.data.reshape(shape))
    return _make(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))
    return _make(data, (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                grads.append(np.ascontiguousarray(g[tuple(idx)]))
            else:
                grads.append(None)
        return tuple(grads)

    return _make(data, tuple(tensors), backward)


# -- gather ops --------------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Look up rows of ``table`` by integer id; ids shape is preserved."""
    ids = np.asarray(ids)
    data = np.ascontiguousarray(table.data[ids])

    def backward(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (dt,)

    return _make(data, (table,), backward)


def take_tokens(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather token positions per batch row: x[b,n,d], idx[b,k] -> [b,k,d]."""
    idx = np.asarray(idx)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise DimensionError(f"take_tokens: x {x.shape} vs idx {idx.shape}")
    data = np.ascontiguousarray(np.take_along_axis(x.data, idx[:, :, None], axis=1))
    bidx = np.arange(x.shape[0])[:, None]

    def backward(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (bidx, idx), g)
        return (dx,)

    return _make(data, (x,), backward)


# -- matmul ------------------------------------------------------------------


def _swap_last(arr: np.ndarray) -> np.ndarray:
    return np.swapaxes(arr, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with 64-bit accumulation; batched when ndim > 2.

    Leading (batch) extents must match exactly; broadcasting batch dims is
    not supported.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    dt = _result_dtype(a, b)
    a64 = a.data.astype(np.float64, copy=False)
    b64 = b.data.astype(np.float64, copy=False)
    data = np.matmul(a64, b64).astype(dt, copy=False)

    def backward(g):
        g64 = g.astype(np.float64, copy=False)
        ga = np.matmul(g64, _swap_last(b64)).astype(dt, copy=False) if a.requires_grad else None
        gb = np.matmul(_swap_last(a64), g64).astype(dt, copy=False) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), backward)


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)
    data = np.asarray(data)

    def backward(g):
        g2 = g if axis is None or keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).astype(a.data.dtype),)

    return _make(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis] if isinstance(axis, int) else int(np.prod([a.shape[i] for i in axis]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), _as_tensor(1.0 / count, a))


# -- normalization / softmax ---------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit population variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shape mismatch: x last extent {d}, gain {gain.shape}, bias {bias.shape}"
        )
    if eps < 0:
        raise ContractError(f"layer_norm eps must be >= 0, got {eps}")
    dt = _result_dtype(x, gain, bias)
    x64 = x.data.astype(np.float64, copy=False)
    mu = x64.mean(axis=-1, keepdims=True)
    var = x64.var(axis=-1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu) * inv_sigma
    data = (xhat * gain.data + bias.data).astype(dt, copy=False)

    def backward(g):
        g64 = g.astype(np.float64, copy=False)
        dxhat = g64 * gain.data
        gx = None
        if x.requires_grad:
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = (inv_sigma * (dxhat - m1 - xhat * m2)).astype(dt, copy=False)
        lead = tuple(range(x.ndim - 1))
        ggain = (g64 * xhat).sum(axis=lead).astype(dt, copy=False) if gain.requires_grad else None
        gbias = g64.sum(axis=lead).astype(dt, copy=False) if bias.requires_grad else None
        return gx, ggain, gbias

    return _make(data, (x, gain, bias), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction for overflow safety."""
    x64 = x.data.astype(np.float64, copy=False)
    shifted = x64 - x64.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    data = s.astype(x.data.dtype, copy=False)

    def backward(g):
        g64 = g.astype(np.float64, copy=False)
        dot = (g64 * s).sum(axis=-1, keepdims=True)
        return ((s * (g64 - dot)).astype(x.data.dtype, copy=False),)

    return _make(data, (x,), backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    x64 = x.data.astype(np.float64, copy=False)
    shifted = x64 - x64.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    ls = shifted - lse
    data = ls.astype(x.data.dtype, copy=False)

    def backward(g):
        g64 = g.astype(np.float64, copy=False)
        total = g64.sum(axis=-1, keepdims=True)
        return ((g64 - np.exp(ls) * total).astype(x.data.dtype, copy=False),)

    return _make(data, (x,), backward)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale each last-axis row to unit Euclidean norm."""
    norm = sqrt(tsum(mul(x, x), axis=-1, keepdims=True))
    return div(x, norm)


# -- backward pass -------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) on every reachable requires_grad tensor."""
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward root is not connected to the graph")
    order = _topo_order(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            prev = pending.get(id(parent))
            pending[id(parent)] = pg if prev is None else prev + pg


def zero_grads(tensors) -> None:
    """Reset accumulated gradients between optimizer steps."""
    for t in tensors:
        t.grad = None


# -- gradient checking ----------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Worst relative discrepancy between backprop and central differences.

    The finite-difference side evaluates ``f`` on float64 tensors and divides
    by the actually-stored perturbation, so the oracle error is dominated by
    the O(eps^2) truncation term rather than storage rounding.
    """
    probe = Tensor(x.data.copy(), requires_grad=True, dtype=x.data.dtype)
    out = f(probe)
    if out.size != 1:
        raise ContractError(f"grad_check target must be scalar, got {out.shape}")
    backward(out)
    analytic = probe.grad.astype(np.float64).reshape(-1)

    base = x.data.astype(np.float64).reshape(-1)
    numeric = np.zeros_like(base)
    with no_grad():
        for i in range(base.size):
            hi = base.copy()
            lo = base.copy()
            hi[i] = base[i] + eps
            lo[i] = base[i] - eps
            f_hi = f(Tensor(hi.reshape(x.shape), dtype=np.float64)).item()
            f_lo = f(Tensor(lo.reshape(x.shape), dtype=np.float64)).item()
            numeric[i] = (f_hi - f_lo) / (hi[i] - lo[i])

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))
