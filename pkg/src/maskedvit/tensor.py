"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records a backward closure on its output,
so `backward(loss)` can walk the graph in reverse topological order and
accumulate gradients into the participating tensors. Storage is always
C-contiguous float64; broadcasting follows numpy rules and is undone in
the backward pass by summing over the broadcast axes.

Only the operations the model needs exist here. Notable numeric
contracts:

* `softmax_lastdim` subtracts the row maximum before exponentiating, so
  entries equal to -inf come out as exactly 0.0 rather than merely tiny.
* `gelu` uses the exact erf formulation, not the tanh approximation.
* `layer_norm` normalizes with the population variance of the last axis.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class AllMaskedRowError(ValueError):
    """A softmax row contained nothing but -inf, so it has no distribution."""


class NonScalarLossError(ValueError):
    """backward() requires a scalar root."""


class Tensor:
    """N-dimensional float64 array with an optional gradient slot.

    Treat `data` as immutable once the tensor has entered a computation;
    the only sanctioned in-place mutation is a parameter update between
    steps (the graph is rebuilt every step).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:  # ascontiguousarray would promote 0-d to 1-d
            arr = np.ascontiguousarray(arr)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

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
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """A defensive copy of the values."""
        return self.data.copy()

    def __repr__(self) -> str:
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={self.shape}{grad})"

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, key):
        return _index(self, key)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)

    def sum(self) -> "Tensor":
        return _reduce_sum(self)

    def mean(self) -> "Tensor":
        return _reduce_mean(self)


class Parameter(Tensor):
    """Trainable tensor with a unique name (uniqueness enforced by the owner)."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        if not name:
            raise ValueError("parameter name must be non-empty")
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += grad


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), back)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x) with Phi the standard normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * cdf

    def back(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        _accumulate(x, g * (cdf + xd * pdf))

    return _node(out, (x,), back)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where `mask` is True with the constant `value`.

    Replaced positions carry no gradient; the fill is a substitution, so
    the original entries there never influence anything downstream.
    """
    mask = np.asarray(mask, dtype=bool)
    try:
        mask_b = np.broadcast_to(mask, x.shape)
    except ValueError as exc:
        raise ShapeError(f"mask shape {mask.shape} does not broadcast to {x.shape}") from exc
    out = np.where(mask_b, np.float64(value), x.data)

    def back(g):
        _accumulate(x, np.where(mask_b, 0.0, g))

    return _node(out, (x,), back)


# -- shape manipulation ----------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc

    def back(g):
        _accumulate(a, g.reshape(a.shape))

    return _node(out, (a,), back)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"axes {axes} are not a permutation of 0..{a.ndim - 1}")
    inverse = tuple(int(i) for i in np.argsort(axes))

    def back(g):
        _accumulate(a, np.ascontiguousarray(g.transpose(inverse)))

    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,), back)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from exc

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))

    return _node(out, (a,), back)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    tensors = [_as_tensor(t) for t in tensors]
    axis = int(axis)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            key = [slice(None)] * g.ndim
            key[axis] = slice(int(lo), int(hi))
            _accumulate(t, g[tuple(key)])

    return _node(out, tuple(tensors), back)


def _validate_key(key, ndim: int):
    items = key if isinstance(key, tuple) else (key,)
    if len(items) > ndim:
        raise ShapeError(f"too many indices for {ndim}-d tensor: {key!r}")
    for item in items:
        if not isinstance(item, (int, np.integer, slice)):
            raise ShapeError(f"only ints and slices are indexable, got {item!r}")
    return key


def _index(a: Tensor, key) -> Tensor:
    key = _validate_key(key, a.ndim)
    out = a.data[key]

    def back(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[key] += g

    return _node(np.ascontiguousarray(out), (a,), back)


# -- contractions and reductions --------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    Both operands need ndim >= 2; leading batch axes broadcast.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-d or higher operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def back(g):
        _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _node(np.matmul(a.data, b.data), (a, b), back)


def _reduce_sum(a: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, np.full_like(a.data, float(g)))

    return _node(np.asarray(a.data.sum()), (a,), back)


def _reduce_mean(a: Tensor) -> Tensor:
    n = a.data.size

    def back(g):
        _accumulate(a, np.full_like(a.data, float(g) / n))

    return _node(np.asarray(a.data.mean()), (a,), back)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, exact on masked entries.

    The row maximum is subtracted before exponentiating. An input entry
    of -inf therefore maps to exp(-inf) == 0.0 exactly, and the row sum
    excludes it bit-exactly. A row that is entirely -inf has no
    distribution and raises AllMaskedRowError.
    """
    xd = x.data
    if xd.ndim < 1:
        raise ShapeError("softmax needs at least one axis")
    rowmax = np.max(xd, axis=-1, keepdims=True)
    if np.isneginf(rowmax).any():
        raise AllMaskedRowError("softmax row is entirely -inf (every key masked)")
    shifted = xd - rowmax  # -inf stays -inf; finite entries stay finite
    expx = np.exp(shifted)
    denom = expx.sum(axis=-1, keepdims=True)
    probs = expx / denom

    def back(g):
        inner = (g * probs).sum(axis=-1, keepdims=True)
        _accumulate(x, probs * (g - inner))

    return _node(probs, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift.

    Uses the population variance. `eps` sits inside the square root, so a
    constant row normalizes to zeros instead of NaN.
    """
    if eps <= 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mean) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        _accumulate(beta, _unbroadcast(g, beta.shape))
        _accumulate(gamma, _unbroadcast(g * xhat, gamma.shape))
        gx = g * gamma.data
        term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, term * inv)

    return _node(out, (x, gamma, beta), back)


# -- graph traversal ---------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into `t.grad` for every tensor in the graph.

    Gradients add onto whatever is already stored; call `zero_grad`
    between steps. `loss` must hold exactly one element.
    """
    if loss.data.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
