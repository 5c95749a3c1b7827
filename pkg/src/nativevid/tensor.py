"""
Dense array engine with define-by-run reverse-mode differentiation.

A :class:`Tensor` wraps a NumPy array. Every differentiable operation on
tensors that require gradients records a tape node holding its parents and
a closure mapping the output gradient to one gradient per parent. Calling
:func:`backward` on a scalar walks the tape once in reverse topological
order and accumulates gradients, summing contributions when a value is
used more than once.

Precision follows the input arrays: tests and oracles run in float64,
training runs in float32. No dtype promotion happens behind the caller's
back; Python scalars are cast to the tensor dtype.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    # -- operator sugar ---------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap a forward result and, when needed, record its tape node.

    ``backward_fn(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _lift(a, like: Tensor) -> Tensor:
    if isinstance(a, Tensor):
        return a
    return Tensor(np.asarray(a, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_op(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)), "div")


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return make_op(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return make_op(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return make_op(x * s, (a,), lambda g: (g * (s + x * s * (1 - s)),), "silu")


# -- reductions & shape -----------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return make_op(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return make_op(a.data[index], (a,), bw, "getitem")


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 0; repeated indices accumulate on backward."""
    shape, dtype = a.shape, a.dtype
    idx = np.asarray(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return make_op(a.data[idx], (a,), bw, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def segment_mean(a: Tensor, boundaries: Sequence[int]) -> Tensor:
    """Mean of row blocks ``a[b[i]:b[i+1]]``; returns (len(b)-1, ...)."""
    b = np.asarray(boundaries, dtype=np.int64)
    counts = np.diff(b)
    if np.any(counts <= 0):
        raise ContractError("segment_mean requires non-empty segments")
    out = np.stack([a.data[b[i]:b[i + 1]].mean(axis=0) for i in range(len(counts))])
    shape = a.shape

    def bw(g):
        scaled = g / counts.reshape((-1,) + (1,) * (g.ndim - 1)).astype(g.dtype)
        return (np.repeat(scaled, counts, axis=0).reshape(shape),)

    return make_op(out, (a,), bw, "segment_mean")


# -- linear algebra -------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != (b.shape[-2] if b.ndim >= 2 else b.shape[0]):
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = np.tensordot(ad, g, axes=(list(range(ad.ndim - 1)), list(range(g.ndim))))
            return ga, gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    if ad.dtype == np.float32 and bd.dtype == np.float32:
        # BLAS picks kernels by row count, so a float32 row would depend on its
        # batch; float64 accumulation rounds back to the same float32 value
        out = (ad.astype(np.float64) @ bd.astype(np.float64)).astype(np.float32)
    else:
        out = ad @ bd
    return make_op(out, (a, b), bw, "matmul")


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < max(a.ndim, 1):
        raise DimensionError(f"softmax axis {axis} invalid for shape {a.shape}")
    s = softmax_np(a.data, axis)

    def bw(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return make_op(s, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = x - np.max(x, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return make_op(out, (a,), lambda g: (g - s * np.sum(g, axis=axis, keepdims=True),), "log_softmax")


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer class labels over rows."""
    y = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    lp = log_softmax(logits, axis=-1)
    picked = lp.data[np.arange(n), y]
    p = np.exp(lp.data)

    def bw(g):
        grad = p.copy()
        grad[np.arange(n), y] -= 1.0
        return (grad * (g / n),)

    # routed straight to logits: the fused rule skips the log_softmax node
    return make_op(np.asarray(-picked.mean(), dtype=logits.dtype), (logits,), bw, "cross_entropy")


# -- differentiation ----------------------------------------------------------
def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> list | None:
    """Propagate d(loss)/d(.) to every leaf that requires gradients.

    Gradients accumulate into ``leaf.grad``. When ``leaves`` is given, the
    gradient of each listed leaf is also returned, zeros where no path
    exists.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_toposort(loss)):
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
    if leaves is None:
        return None
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


def finite_diff_report(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
                       max_coords: int | None = None, seed: int = 0) -> list[float]:
    """Worst relative error per parameter, analytic vs. central differences.

    ``f`` rebuilds the loss from the current parameter values every call.
    At most ``max_coords`` coordinates per parameter are probed, drawn with
    ``seed``; ``None`` probes all of them.
    """
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    for p in params:
        p.grad = None
    analytic = backward(f(), params)
    rng = np.random.default_rng(seed)
    worst = []
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            if not np.shares_memory(flat, p.data):
                raise ContractError("finite_diff_check needs contiguous parameter arrays")
            gflat = ga.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            err = 0.0
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                fp = float(f().data)
                flat[i] = orig - step
                fm = float(f().data)
                flat[i] = orig
                num = (fp - fm) / (2 * step)
                ana = float(gflat[i])
                denom = max(abs(ana), abs(num), 1e-8)
                err = max(err, abs(ana - num) / denom)
            worst.append(err)
    return worst


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
                      max_coords: int | None = None, seed: int = 0) -> float:
    """Maximum relative gradient error over all probed coordinates."""
    report = finite_diff_report(f, params, step, max_coords, seed)
    return max(report) if report else 0.0
