"""Dense float64 arrays with reverse-mode automatic differentiation.

Values are stored as numpy ``float64`` arrays (row-major). Every operation on
:class:`Tensor` records its parents and a backward rule; :func:`backward`
walks the graph in reverse creation order and accumulates gradients.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "DimensionError",
    "Tensor",
    "as_tensor",
    "no_grad",
    "matmul",
    "softmax",
    "layer_norm",
    "gelu",
    "sigmoid",
    "bce_with_logits",
    "concat",
    "take",
    "backward",
    "grad_check",
    "GradCheckReport",
    "sgd_update",
]


class DimensionError(ValueError):
    pass


_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A node of the computation graph.

    ``data`` is never mutated by graph operations once captured; only
    optimizer updates write to leaf parameters, outside of any graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_index", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and min(arr.shape) < 1:
            raise DimensionError(f"extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._index = next(_counter)
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # arithmetic -----------------------------------------------------------
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return tsum(self, axis, keepdims) * (1.0 / n)

    def max(self, axis: int = -1):
        return tmax(self, axis)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op: str) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), bw, "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * out)

    return _make(out, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), bw, "log")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)

    def bw(g):
        _accumulate(a, g * out * (1.0 - out))

    return _make(out, (a,), bw, "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error linear unit, ``x * Phi(x)``."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        _accumulate(a, g * (cdf + x * pdf))

    return _make(x * cdf, (a,), bw, "gelu")


# shape ------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accumulate(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bw, "transpose")


def roll(a: Tensor, shift, axis) -> Tensor:
    def bw(g):
        neg_shift = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift
        _accumulate(a, np.roll(g, neg_shift, axis))

    return _make(np.roll(a.data, shift, axis), (a,), bw, "roll")


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in parts)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        _accumulate(a, full)

    return _make(a.data[idx], (a,), bw, "getitem")


def take(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by an integer index array of any shape."""
    index = np.asarray(index)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        _accumulate(table, full)

    return _make(table.data[index], (table,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


# reductions -------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(out, (a,), bw, "sum")


def tmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    arg = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        _accumulate(a, full)

    return _make(out, (a,), bw, "max")


# linear algebra -----------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast like ``numpy.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                # fold batch axes so the weight gradient is one GEMM
                a2 = a.data.reshape(-1, a.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                _accumulate(b, a2.T @ g2)
            else:
                _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(out, (a, b), bw, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if not np.all(np.isfinite(x) | np.isneginf(x)):
        raise FloatingPointError("softmax received non-finite input")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accumulate(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (a,), bw, "softmax")


def layer_norm(x: Tensor, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    gain, bias = as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm affine shape {gain.shape}/{bias.shape} vs last axis {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, dx)

    return _make(out, (x, gain, bias), bw, "layer_norm")


def bce_with_logits(logits: Tensor, targets, class_weights) -> Tensor:
    """Class-weighted mean binary cross-entropy on logits.

    ``sum_{i,c} w_c * bce_ic / (rows * sum_c w_c)``, each term evaluated as
    ``max(z, 0) - z*y + log1p(exp(-|z|))``.
    """
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    w = np.asarray(class_weights, dtype=np.float64)
    if y.shape != logits.shape:
        raise DimensionError(f"targets {y.shape} vs logits {logits.shape}")
    if w.shape != (logits.shape[-1],):
        raise DimensionError(f"class weights {w.shape} vs {logits.shape[-1]} classes")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("targets must be binary (0 or 1)")
    z = logits.data
    rows = z.size // z.shape[-1]
    norm = rows * w.sum()
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.array((per * w).sum() / norm)

    def bw(g):
        _accumulate(logits, g * (_sigmoid(z) - y) * w / norm)

    return _make(out, (logits,), bw, "bce_with_logits")


# backward -----------------------------------------------------------------------

def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every node reachable from scalar ``root``.

    Nodes are visited in decreasing creation index, which is a reverse
    topological order because parents always exist before their children.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    seen = {id(root)}
    stack = [root]
    nodes = []
    while stack:
        n = stack.pop()
        nodes.append(n)
        for p in n._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    nodes.sort(key=lambda n: n._index, reverse=True)
    # interior gradients are recomputed on every call; leaves accumulate
    for n in nodes:
        if n._backward is not None:
            n.grad = None
    root.grad = np.ones_like(root.data)
    for n in nodes:
        if n._backward is not None and n.grad is not None:
            n._backward(n.grad)


# verification and optimisation -----------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    worst_error: float
    worst_param: int
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    n_checked: int

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}: {self.n_checked} coordinates, worst rel. err {self.worst_error:.3e} "
            f"at param {self.worst_param} index {self.worst_index} "
            f"(analytic {self.analytic:.6e}, numeric {self.numeric:.6e})"
        )


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central differences.

    With ``max_coords`` set, that many coordinates are sampled uniformly
    across all parameters; otherwise every coordinate is checked.
    Error is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        p.zero_grad()
    loss = f()
    backward(loss)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if max_coords is not None and max_coords < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = (-1.0, 0, (0,), 0.0, 0.0)
    with no_grad():
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h
            fp = float(f().data)
            flat[j] = orig - h
            fm = float(f().data)
            flat[j] = orig
            num = (fp - fm) / (2.0 * h)
            ana = float(grads[i].reshape(-1)[j])
            err = abs(ana - num) / max(1.0, abs(ana))
            if err > worst[0]:
                worst = (err, i, np.unravel_index(j, params[i].shape), ana, num)
    err, i, idx, ana, num = worst
    return GradCheckReport(
        passed=bool(err <= tol),
        worst_error=max(err, 0.0),
        worst_param=i,
        worst_index=tuple(int(k) for k in idx),
        analytic=ana,
        numeric=num,
        n_checked=len(coords),
    )


def sgd_update(params: Sequence[Tensor], lr: float, grads: Sequence[np.ndarray | None] | None = None) -> None:
    """Plain SGD step ``p <- p - lr * g``.

    ``grads`` defaults to each parameter's ``.grad``; parameters without a
    gradient are left alone.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if grads is None:
        grads = [p.grad for p in params]
    for p, g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise DimensionError(f"grad {g.shape} vs param {p.data.shape}")
        p.data = p.data - lr * g
