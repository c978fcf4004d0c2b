"""Dense tensors with a reverse-mode tape.

Ops are coarse (a whole layer norm or softmax is one node) so that a
transformer step records a few dozen nodes rather than thousands. Recording
happens only while a :class:`Tape` is active and at least one input requires
a gradient; outside a tape the same functions are plain numpy evaluations.

Gradients of intermediate nodes are kept after ``backward`` so callers can
read dLoss/dActivation from any tensor they held on to.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "backward",
    "set_finite_checks",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "take_rows",
    "sum_all",
    "mean_all",
    "softmax_rows",
    "gelu",
    "layer_norm",
    "mse",
    "cross_entropy",
    "dropout",
]


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared in a forward value or a gradient."""


_CHECK_FINITE = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle the per-op NaN/Inf check; returns the previous setting."""
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return previous


def _check(arr: np.ndarray, where: str) -> None:
    # a finite sum implies finite entries; only fall back to the full scan when it is not
    if _CHECK_FINITE and not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {where}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        self.requires_grad = flag
        return self

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


_Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class _Node:
    __slots__ = ("out", "inputs", "vjp", "op")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: _Backward, op: str):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.op = op


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; every op evaluated inside it whose inputs need
    gradients is appended in evaluation order, which is a topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self, "tapes must be closed in LIFO order"

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: _Backward, op: str) -> None:
        out.requires_grad = True
        out._tape = self
        self.nodes.append(_Node(out, inputs, vjp, op))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        if loss.data.size != 1 and seed is None:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        g0 = np.ones_like(loss.data) if seed is None else np.asarray(seed, dtype=loss.dtype)
        loss.grad = g0 if loss.grad is None else loss.grad + g0
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.vjp(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                _check(gi, f"backward of {node.op}")
                inp.grad = gi if inp.grad is None else inp.grad + gi


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that contributed to ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ValueError("loss was not produced on an active tape")
    loss._tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: _Backward, op: str) -> Tensor:
    _check(data, op)
    out = Tensor(data, dtype=data.dtype)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        _ACTIVE[-1].record(out, inputs, vjp, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 1 and g.shape[-1] == shape[0] and g.flags.c_contiguous:
        return g.reshape(-1, shape[0]).sum(axis=0)
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _emit(ad * bd, (a, b), vjp, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


# linear algebra and shape ops ------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul needs at least 2-d operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {ad.shape} @ {bd.shape}")
    if bd.ndim == 2:
        # (…, k) @ (k, n): fold the leading axes into one GEMM
        k, n = bd.shape
        a2 = ad.reshape(-1, k)

        def vjp2(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _emit((a2 @ bd).reshape(ad.shape[:-1] + (n,)), (a, b), vjp2, "matmul")

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit(ad @ bd, (a, b), vjp, "matmul")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(old),), "reshape")


def take_rows(table: Tensor, idx) -> Tensor:
    """Gather ``table[idx]`` along axis 0; the backward is a scatter-add."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")

    def vjp(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape((-1,) + table.shape[1:]))
        return (out,)

    return _emit(table.data[idx], (table,), vjp, "take_rows")


# reductions ------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _emit(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n, dtype=a.dtype),), "mean")


# nonlinearities --------------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    if x.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (x,), vjp, "softmax")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _emit(xd * cdf, (x,), vjp, "gelu")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm affine shape mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data

    def vjp(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, d).sum(axis=0) if gain.requires_grad else None
        gbias = g.reshape(-1, d).sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return _emit(xhat * gd + bias.data, (x, gain, bias), vjp, "layer_norm")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or ``rng`` is None."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _emit(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# losses ----------------------------------------------------------------------

def mse(a, b) -> Tensor:
    """Mean over all elements of the squared difference."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def vjp(g):
        ga = (2.0 / n) * g * diff
        return (ga if a.requires_grad else None, -ga if b.requires_grad else None)

    return _emit(np.asarray((diff * diff).mean()), (a, b), vjp, "mse")


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of integer ``targets`` under row softmax, ``mean`` or ``sum`` over rows."""
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if logits.ndim != 2 or targets.shape != (n,):
        raise ValueError(f"cross_entropy expects (n, V) logits and (n,) targets, got {logits.shape}, {targets.shape}")
    if n == 0:
        raise ValueError("cross_entropy over zero rows")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    rows = np.arange(n)
    scale = 1.0 / n if reduction == "mean" else 1.0
    loss = -logp[rows, targets].sum() * scale

    def vjp(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g * scale),)

    return _emit(np.asarray(loss, dtype=logits.dtype), (logits,), vjp, "cross_entropy")
