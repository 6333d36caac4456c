"""Dense tensors with reverse-mode automatic differentiation.

Every op runs eagerly on numpy arrays and, when any input requires a
gradient, records its parents and a backward closure on the output. Calling
``backward()`` on a scalar walks that graph in reverse topological order,
accumulates gradients into the ``grad`` buffers of the leaves and then frees
the graph; a second ``backward()`` through the same graph raises.

Forward outputs are checked for NaN/Inf and raise :class:`NonFiniteError`
immediately.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

_state = {"dtype": np.dtype(np.float32)}
# Per thread, so concurrent no_grad() blocks in decode workers cannot leak.
_grad = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad, "enabled", True)


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new tensors (e.g. float64 for checks)."""
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph."""
    old = grad_enabled()
    _grad.enabled = False
    try:
        yield
    finally:
        _grad.enabled = old


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f" or arr.dtype != get_default_dtype():
            arr = arr.astype(get_default_dtype(), copy=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._freed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._freed

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() needs a one-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Backpropagate from this tensor into every reachable leaf's ``grad``."""
        if self._freed:
            raise RuntimeError("graph already consumed by backward(); recompute the forward pass")
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without an explicit grad needs a scalar")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._freed = True

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        if node._freed and node is not root:
            raise RuntimeError("graph contains a tensor whose graph was already consumed by backward()")
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=get_default_dtype()))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._freed = False
    need = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = need
    if need:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None,
        )

    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return _make(out, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor, eps: float = 0.0) -> Tensor:
    """Natural log; with ``eps > 0`` the input is clamped from below first."""
    xd = np.maximum(x.data, eps) if eps > 0 else x.data
    passes = x.data >= eps if eps > 0 else None

    def backward(g):
        gx = g / xd
        return (gx if passes is None else np.where(passes, gx, 0.0),)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _make(out, (x,), backward, "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value`` (mask broadcasts to x)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    return _make(out, (x,), lambda g: (np.where(mask, 0.0, g).astype(g.dtype),), "masked_fill")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    with np.errstate(invalid="ignore", over="ignore"):
        out = ad @ bd
    return _make(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def take_last(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[..., 0] = x[..., index]``: one picked entry per row of the last axis."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[:-1]:
        raise ShapeError(f"index shape {index.shape} does not match rows {x.shape[:-1]}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[-1]):
        raise IndexError("take_last index out of range")
    picked = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, index[..., None], g[..., None], axis=-1)
        return (gx,)

    return _make(picked, (x,), backward, "take_last")


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    count = x.data.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), backward, "mean")


# ---------------------------------------------------------------- nn functions


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def cross_entropy(
    logits: Tensor,
    targets: Iterable[int],
    ignore_index: Optional[int] = None,
    reduction: str = "mean",
) -> Tensor:
    """Negative log-likelihood of ``targets`` under row-wise softmax of ``logits``.

    ``logits`` is (n, v). Rows whose target equals ``ignore_index`` contribute
    nothing and are not counted by the mean. ``reduction`` is ``"mean"``,
    ``"sum"`` or ``"none"`` (per-row losses, zero for ignored rows).
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (n, v) logits, got {logits.shape}")
    targets = np.asarray(list(targets) if not isinstance(targets, np.ndarray) else targets, dtype=np.int64)
    n, v = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"expected {n} targets, got {targets.shape}")
    keep = np.ones(n, dtype=bool) if ignore_index is None else targets != ignore_index
    if np.any((targets[keep] < 0) | (targets[keep] >= v)):
        raise IndexError(f"target index out of range for vocabulary of {v}")
    safe = np.where(keep, targets, 0)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = -logp[np.arange(n), safe] * keep
    count = max(int(keep.sum()), 1)
    if reduction == "mean":
        out = np.asarray(rows.sum() / count, dtype=logits.dtype)
    elif reduction == "sum":
        out = np.asarray(rows.sum(), dtype=logits.dtype)
    elif reduction == "none":
        out = rows.astype(logits.dtype)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), safe] -= 1.0
        p *= keep[:, None]
        if reduction == "mean":
            return (p * (g / count),)
        if reduction == "sum":
            return (p * g,)
        return (p * g[:, None],)

    return _make(out, (logits,), backward, "cross_entropy")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        return gx, ggain, gbias

    return _make(out.astype(x.dtype, copy=False), (x, gain, bias), backward, "layer_norm")


def embedding(table: Tensor, indices) -> Tensor:
    """Gather rows of ``table`` (v, d) for an integer index array of any shape."""
    idx = np.asarray(indices, dtype=np.int64)
    v = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(f"token index out of range for table of {v} rows")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[idx], (table,), backward, "embedding")


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad=requires_grad)
