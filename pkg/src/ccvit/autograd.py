"""Dense tensors with reverse-mode differentiation.

Small numpy-backed substrate used by the model and trainer. Values are
float32 by default; gradient oracles and tests run the identical graph in
float64. Every forward operation checks its output for NaN/Inf and raises
NonFiniteError, so divergence surfaces at the op that produced it.

Broadcasting is deliberately narrow: two operands must have equal shapes,
or one shape must be a suffix of the other (leading-batch broadcast, e.g.
bias (d,) against activations (B, n, d)). Anything else needs an explicit
reshape or broadcast_to.

Reductions use numpy's sequential kernels over contiguous memory, so
results are bit-reproducible run to run on the same machine.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "no_grad",
    "tensor",
    "add",
    "mul",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "broadcast_to",
    "take_rows",
    "where_rows",
    "softmax",
    "layer_norm",
    "gelu",
    "cross_entropy",
    "mse",
    "tsum",
    "tmean",
    "grad_check",
]

_FLOAT_DTYPES = (np.float32, np.float64)

# GELU tanh-approximation constants (documented choice: we use the tanh
# form everywhere, forward and backward).
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")


class Tensor:
    """A dense array plus an optional backward edge into the grad tape.

    Treat tensors as immutable values: ops return new tensors, and only
    the optimizer step mutates parameter ``data`` in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        _ensure_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], list[tuple[Tensor, np.ndarray]]] | None = None

    # -- construction used by ops (skips re-validation of dtype) --
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], vjp, op: str) -> "Tensor":
        _ensure_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    # -- basic introspection --
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff --
    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this (scalar) tensor into the tape leaves."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError("seed gradient shape must match tensor shape")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in node._vjp(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operator sugar --
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def __getitem__(self, idx) -> "Tensor":
        return _getitem(self, idx)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# broadcasting helpers (equal shapes or suffix-of-leading-dims only)
# ---------------------------------------------------------------------------


def _suffix_broadcastable(sa: tuple[int, ...], sb: tuple[int, ...]) -> bool:
    if sa == sb:
        return True
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if small == ():
        return True
    return big[len(big) - len(small):] == small


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if not _suffix_broadcastable(a.shape, b.shape):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not leading-batch broadcastable")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def vjp(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return Tensor._from_op(out, (a, b), vjp, "add")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        scalar = float(b)
        out = a.data * scalar

        def vjp_s(g):
            return [(a, g * scalar)]

        return Tensor._from_op(out, (a,), vjp_s, "mul")

    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def vjp(g):
        return [(a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape))]

    return Tensor._from_op(out, (a, b), vjp, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b``.

    Supports plain 2-D matrices, stacked ``a`` against a 2-D ``b`` (the
    shared-weight case), and stacked operands with identical leading dims.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree ({a.shape} @ {b.shape})")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dimensions disagree ({a.shape} @ {b.shape})")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            k = a.shape[-1]
            p = g.shape[-1]
            gb = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, p))
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return [(a, ga), (b, gb)]

    return Tensor._from_op(out, (a, b), vjp, "matmul")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = np.reshape(x.data, shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {e}") from None
    in_shape = x.shape

    def vjp(g):
        return [(x, np.reshape(g, in_shape))]

    return Tensor._from_op(out, (x,), vjp, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(ax) for ax in axes)
    out = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return [(x, np.transpose(g, inv))]

    return Tensor._from_op(out, (x,), vjp, "transpose")


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis for p in parts)


def _getitem(x: Tensor, idx) -> Tensor:
    # Basic indexing only (slices/ints/ellipsis); row gathers go through
    # take_rows so repeated indices accumulate correctly.
    if not _is_basic_index(idx):
        raise ShapeError("getitem: only basic indexing is supported; use take_rows for index arrays")
    out = np.ascontiguousarray(x.data[idx])
    in_shape = x.shape

    def vjp(g):
        gx = np.zeros(in_shape, dtype=g.dtype)
        gx[idx] = g
        return [(x, gx)]

    return Tensor._from_op(out, (x,), vjp, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        parts = np.split(g, splits, axis=axis)
        return list(zip(tensors, parts))

    return Tensor._from_op(out, tuple(tensors), vjp, "concat")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if not _suffix_broadcastable(x.shape, shape) or len(shape) < x.ndim:
        raise ShapeError(f"broadcast_to: {x.shape} is not a suffix of {shape}")
    out = np.broadcast_to(x.data, shape).copy()

    def vjp(g):
        return [(x, _unbroadcast(g, x.shape))]

    return Tensor._from_op(out, (x,), vjp, "broadcast_to")


def take_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0; gradients accumulate over repeated indices."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ShapeError("take_rows: indices must be integers")
    out = x.data[idx]
    in_shape = x.shape

    def vjp(g):
        gx = np.zeros(in_shape, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return [(x, gx)]

    return Tensor._from_op(out, (x,), vjp, "take_rows")


def where_rows(mask: np.ndarray, row: Tensor, x: Tensor) -> Tensor:
    """Replace rows of ``x`` selected by a boolean ``mask`` with ``row``.

    ``x`` has shape (..., n, d), ``mask`` shape (..., n), ``row`` shape (d,).
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:-1]:
        raise ShapeError(f"where_rows: mask shape {mask.shape} must match {x.shape[:-1]}")
    if row.shape != x.shape[-1:]:
        raise ShapeError(f"where_rows: row shape {row.shape} must be ({x.shape[-1]},)")
    out = np.where(mask[..., None], row.data, x.data)

    def vjp(g):
        gx = np.where(mask[..., None], 0.0, g).astype(g.dtype)
        grow = g[mask].sum(axis=0) if mask.any() else np.zeros_like(row.data)
        return [(row, grow), (x, gx)]

    return Tensor._from_op(out, (row, x), vjp, "where_rows")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * s, axis=axis, keepdims=True)
        return [(x, s * (g - dot))]

    return Tensor._from_op(s, (x,), vjp, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each row (last axis) to zero mean / unit variance, then affine.

    Population variance with ``eps`` inside the square root, so constant
    rows normalize to exactly zero instead of NaN.
    """
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm: gamma/beta must have shape (d,)")
    mean = np.mean(x.data, axis=-1, keepdims=True)
    centered = x.data - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xn = centered * inv_std
    out = xn * gamma.data + beta.data

    def vjp(g):
        gxn = g * gamma.data
        gx = inv_std * (
            gxn
            - np.mean(gxn, axis=-1, keepdims=True)
            - xn * np.mean(gxn * xn, axis=-1, keepdims=True)
        )
        axes = tuple(range(g.ndim - 1))
        ggamma = np.sum(g * xn, axis=axes)
        gbeta = np.sum(g, axis=axes)
        return [(x, gx), (gamma, ggamma), (beta, gbeta)]

    return Tensor._from_op(out, (x, gamma, beta), vjp, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """GELU activation, tanh approximation:

        0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
    """
    x3 = x.data * x.data * x.data
    u = _GELU_C * (x.data + _GELU_A * x3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data * x.data)
        dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        return [(x, g * dx)]

    return Tensor._from_op(out, (x,), vjp, "gelu")


def cross_entropy(logits: Tensor, targets: np.ndarray, reduction: str = "mean") -> Tensor:
    """Cross entropy of ``logits`` (M, K) against integer ``targets`` (M,).

    Computed via a shifted log-sum-exp, so it is invariant to adding a
    constant to every logit and never overflows.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    t = np.asarray(targets)
    m_rows, k = logits.shape
    if m_rows == 0:
        raise ShapeError("cross_entropy: empty batch")
    if t.shape != (m_rows,):
        raise ShapeError(f"cross_entropy: targets must have shape ({m_rows},)")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ValueError(f"cross_entropy: target index out of range [0, {k})")
    if reduction not in ("mean", "sum"):
        raise ValueError("cross_entropy: reduction must be 'mean' or 'sum'")

    shift = logits.data - np.max(logits.data, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shift), axis=1))
    per_row = lse - shift[np.arange(m_rows), t]
    total = np.sum(per_row)
    out = np.asarray(total / m_rows if reduction == "mean" else total, dtype=logits.dtype)

    def vjp(g):
        p = np.exp(shift)
        p /= np.sum(p, axis=1, keepdims=True)
        p[np.arange(m_rows), t] -= 1.0
        scale = g / m_rows if reduction == "mean" else g
        return [(logits, p * scale)]

    return Tensor._from_op(out, (logits,), vjp, "cross_entropy")


def mse(pred: Tensor, target, reduction: str = "mean") -> Tensor:
    """Mean (or summed) squared error over all elements."""
    tgt = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != tgt.shape:
        raise ShapeError(f"mse: shapes differ ({pred.shape} vs {tgt.shape})")
    if pred.size == 0:
        raise ShapeError("mse: empty input")
    if reduction not in ("mean", "sum"):
        raise ValueError("mse: reduction must be 'mean' or 'sum'")
    diff = pred.data - tgt.data
    total = np.sum(diff * diff)
    n = pred.size
    out = np.asarray(total / n if reduction == "mean" else total, dtype=pred.dtype)

    def vjp(g):
        scale = g * (2.0 / n) if reduction == "mean" else g * 2.0
        return [(pred, scale * diff), (tgt, -scale * diff)]

    return Tensor._from_op(out, (pred, tgt), vjp, "mse")


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(np.sum(x.data), dtype=x.dtype)

    def vjp(g):
        return [(x, np.full(x.shape, g, dtype=x.dtype))]

    return Tensor._from_op(out, (x,), vjp, "sum")


def tmean(x: Tensor) -> Tensor:
    out = np.asarray(np.mean(x.data), dtype=x.dtype)
    n = x.size

    def vjp(g):
        return [(x, np.full(x.shape, g / n, dtype=x.dtype))]

    return Tensor._from_op(out, (x,), vjp, "mean")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    max_coords_per_param: int = 20,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare tape gradients of ``f()`` against central finite differences.

    ``f`` is a closure over ``params`` returning a scalar tensor. Every
    parameter must be float64 (the check is meaningless in float32).
    Returns the maximum relative error over the sampled coordinates, where
    relative error is |a - b| / max(|a| + |b|, 1e-3).
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError("grad_check: eps must lie in [1e-6, 1e-3]")
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("grad_check: parameters must be float64")
        if not p.requires_grad:
            raise ValueError("grad_check: all parameters must require gradients")
    rng = rng or np.random.default_rng(0)

    for p in params:
        p.zero_grad()
    y = f()
    if y.size != 1:
        raise ValueError("grad_check: f must return a scalar")
    y.backward()
    tape_grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, tg in zip(params, tape_grads):
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        for c in coords:
            orig = flat[c]
            with no_grad():
                flat[c] = orig + eps
                hi = float(f().data)
                flat[c] = orig - eps
                lo = float(f().data)
                flat[c] = orig
            fd = (hi - lo) / (2.0 * eps)
            if not math.isfinite(fd):
                raise NonFiniteError("grad_check: non-finite finite-difference value")
            a = float(tg.reshape(-1)[c])
            err = abs(a - fd) / max(abs(a) + abs(fd), 1e-3)
            if err > worst:
                worst = err
    return worst
