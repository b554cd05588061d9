"""Dense float32 tensors with a reverse-mode gradient tape.

Forward math is plain numpy. Every differentiable op records a
vector-Jacobian closure on the active :class:`GradTape`; ``backward``
replays the records in exact reverse execution order. Storage is f32
throughout; reductions (softmax sums, layer-norm moments, loss sums)
accumulate in f64 before casting back.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float32

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class MaskError(ValueError):
    """A softmax row has no allowed positions."""


class TapeError(RuntimeError):
    """Gradient tape misuse (non-scalar loss, reuse without reset)."""


class Tensor:
    """A dense f32 array, optionally tracked for gradients.

    ``grad`` is populated on leaf tensors by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_leaf")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; heavy ops are module functions
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other) -> "Tensor":
        return self.__mul__(other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Construct a tensor from array-like data; rejects non-finite values."""
    t = Tensor(data, requires_grad=requires_grad)
    if not np.all(np.isfinite(t.data)):
        raise ValueError("tensor data must be finite")
    return t


def param(data) -> Tensor:
    """A leaf tensor tracked for gradients."""
    return tensor(data, requires_grad=True)


def _wrap(data: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = np.ascontiguousarray(data, dtype=DTYPE)
    t.requires_grad = False
    t.grad = None
    t._leaf = True
    return t


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_ACTIVE: Optional["GradTape"] = None


class GradTape:
    """Ordered record of executed ops; context manager activates recording."""

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], VJP]] = []
        self._used = False

    def __enter__(self) -> "GradTape":
        global _ACTIVE
        if _ACTIVE is not None:
            raise TapeError("a gradient tape is already active")
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = None

    def __len__(self) -> int:
        return len(self._entries)

    def reset(self) -> None:
        self._entries.clear()
        self._used = False


def record(out: Tensor, inputs: tuple[Tensor, ...], vjp: VJP) -> Tensor:
    """Register a custom op on the active tape (no-op when untaped)."""
    tape = _ACTIVE
    if tape is None or not any(i.requires_grad for i in inputs):
        return out
    out.requires_grad = True
    out._leaf = False
    tape._entries.append((out, inputs, vjp))
    return out


def backward(loss: Tensor, tape: GradTape) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every leaf parameter on the tape.

    Visits ops in exact reverse execution order with freshly zeroed
    accumulators. A second call on the same tape without ``reset`` raises.
    """
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if tape._used:
        raise TapeError("tape already consumed by backward; call reset() first")
    tape._used = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, vjp in reversed(tape._entries):
        g = grads.pop(id(out), None)
        holders.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = gi if prev is None else prev + gi
            holders[id(inp)] = inp

    result: dict[Tensor, np.ndarray] = {}
    for key, t in holders.items():
        if t._leaf and t.requires_grad:
            g = np.asarray(grads[key], dtype=DTYPE)
            t.grad = g
            result[t] = g
    return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and linear ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _wrap(a.data + b.data)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return record(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _wrap(a.data - b.data)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return record(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _wrap(a.data * b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return record(out, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    out = _wrap(a.data * s)

    def vjp(g):
        return (g * s,)

    return record(out, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-D matrix product."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul requires (m,k) x (k,n); got {a.data.shape} x {b.data.shape}"
        )
    out = _wrap(a.data @ b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return record(out, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: x @ w + b, x is (n, d_in)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(
            f"linear requires (n,k) x (k,m); got {x.data.shape} x {w.data.shape}"
        )
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    out = _wrap(y)
    xd, wd = x.data, w.data

    def vjp(g):
        gx = g @ wd.T
        gw = xd.T @ g
        gb = g.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return record(out, inputs, vjp)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = _wrap(xd * cdf)

    def vjp(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (cdf + xd * pdf),)

    return record(out, (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    out = _wrap(x.data.sum(dtype=np.float64))
    shape = x.data.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).astype(DTYPE),)

    return record(out, (x,), vjp)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = _wrap(x.data.sum(dtype=np.float64) / n)
    shape = x.data.shape

    def vjp(g):
        return (np.broadcast_to(g / n, shape).astype(DTYPE),)

    return record(out, (x,), vjp)


# ---------------------------------------------------------------------------
# normalization and distributions
# ---------------------------------------------------------------------------


def masked_softmax(scores: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to allowed positions.

    ``mask`` is boolean, broadcastable to ``scores``; True marks an allowed
    position. Disallowed positions come out exactly 0; each row of allowed
    positions forms a probability distribution. A fully-masked row raises
    :class:`MaskError` instead of producing NaN.
    """
    m = np.broadcast_to(np.asarray(mask, dtype=bool), scores.data.shape)
    if not m.any(axis=axis).all():
        raise MaskError("masked_softmax: a row has no allowed positions")
    x = np.where(m, scores.data, -np.inf)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x, dtype=DTYPE)
    denom = e.sum(axis=axis, keepdims=True, dtype=np.float64)
    out = _wrap(e / denom)
    probs = out.data

    def vjp(g):
        inner = (g * probs).sum(axis=axis, keepdims=True, dtype=np.float64)
        return ((probs * (g - inner)).astype(DTYPE),)

    return record(out, (scores,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True, dtype=np.float64))
    out = _wrap(shifted - lse)
    od = out.data

    def vjp(g):
        gsum = g.sum(axis=axis, keepdims=True, dtype=np.float64)
        return ((g - np.exp(od, dtype=np.float64) * gsum).astype(DTYPE),)

    return record(out, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization over the last axis (population variance)."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine params must be ({d},); got {gamma.data.shape}, {beta.data.shape}"
        )
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((x64 - mu) * inv).astype(DTYPE)
    out = _wrap(xhat * gamma.data + beta.data)
    inv32 = inv.astype(DTYPE)
    gd = gamma.data

    def vjp(g):
        gxhat = g * gd
        mean_g = gxhat.mean(axis=-1, keepdims=True, dtype=np.float64)
        mean_gx = (gxhat * xhat).mean(axis=-1, keepdims=True, dtype=np.float64)
        gx = inv32 * (gxhat - mean_g - xhat * mean_gx)
        axes = tuple(range(g.ndim - 1))
        return gx.astype(DTYPE), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record(out, (x, gamma, beta), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; gradient scatter-adds back into the table."""
    idx = np.asarray(ids, dtype=np.int64)
    out = _wrap(table.data[idx])
    vocab_shape = table.data.shape

    def vjp(g):
        gt = np.zeros(vocab_shape, dtype=DTYPE)
        np.add.at(gt, idx, g)
        return (gt,)

    return record(out, (table,), vjp)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted-scaling Bernoulli dropout; identity when rate=0 or rng is None."""
    if rate <= 0.0 or rng is None:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    keep = (rng.random(x.data.shape) >= rate).astype(DTYPE) / (1.0 - rate)
    out = _wrap(x.data * keep)

    def vjp(g):
        return (g * keep,)

    return record(out, (x,), vjp)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def conv_subsample(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Single 3x3 conv over a (T, F) feature map, time stride 2, padding 1.

    Output is (ceil(T/2), F * C) with C conv channels, ready for a linear
    projection to the model width. Raises on T < 2.
    """
    T, F = x.data.shape
    if T < 2:
        raise ShapeError(f"conv_subsample needs at least 2 frames, got {T}")
    if w.data.ndim != 3 or w.data.shape[:2] != (3, 3):
        raise ShapeError(f"conv weight must be (3,3,C); got {w.data.shape}")
    C = w.data.shape[2]
    Tp = (T - 1) // 2 + 1  # == ceil(T/2)

    xpad = np.zeros((T + 2, F + 2), dtype=DTYPE)
    xpad[1 : T + 1, 1 : F + 1] = x.data
    out3 = np.zeros((Tp, F, C), dtype=DTYPE)
    # nine strided slices instead of an im2col gather
    slices = {}
    for i in range(3):
        for j in range(3):
            sl = xpad[i : i + 2 * (Tp - 1) + 1 : 2, j : j + F]
            slices[(i, j)] = sl
            out3 += sl[:, :, None] * w.data[i, j]
    out3 += b.data
    out = _wrap(out3.reshape(Tp, F * C))

    def vjp(g):
        g3 = g.reshape(Tp, F, C)
        gw = np.zeros((3, 3, C), dtype=DTYPE)
        gxpad = np.zeros((T + 2, F + 2), dtype=DTYPE)
        for i in range(3):
            for j in range(3):
                gw[i, j] = np.einsum("tf,tfc->c", slices[(i, j)], g3)
                gxpad[i : i + 2 * (Tp - 1) + 1 : 2, j : j + F] += g3 @ w.data[i, j]
        gb = g3.sum(axis=(0, 1))
        return gxpad[1 : T + 1, 1 : F + 1], gw, gb

    return record(out, (x, w, b), vjp)


def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-channel 1-D convolution over time with same padding (odd kernel)."""
    T, d = x.data.shape
    k = w.data.shape[0]
    if w.data.shape != (k, d) or k % 2 == 0:
        raise ShapeError(f"depthwise kernel must be (odd_k, {d}); got {w.data.shape}")
    half = k // 2
    xpad = np.zeros((T + k - 1, d), dtype=DTYPE)
    xpad[half : half + T] = x.data
    y = np.zeros((T, d), dtype=DTYPE)
    for j in range(k):
        y += xpad[j : j + T] * w.data[j]
    out = _wrap(y + b.data)

    def vjp(g):
        gw = np.empty((k, d), dtype=DTYPE)
        gxpad = np.zeros((T + k - 1, d), dtype=DTYPE)
        for j in range(k):
            gw[j] = (xpad[j : j + T] * g).sum(axis=0)
            gxpad[j : j + T] += g * w.data[j]
        return gxpad[half : half + T], gw, g.sum(axis=0)

    return record(out, (x, w, b), vjp)
