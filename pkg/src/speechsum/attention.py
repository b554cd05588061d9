"""Multi-head attention kernels for very long sequences.

Three families live here:

* dense self/cross attention (quadratic scores),
* windowed, optionally dilated self-attention in two interchangeable
  forms: a masked reference with dense-sized buffers, and a blocked
  kernel whose score buffers hold only the allowed key slots per query
  (at most W+1 of them, W/D+1 under dilation),
* a FLOP/score-memory accountant for comparing the two regimes.

The element-level rule is the ground truth everywhere: query i may
attend key j iff |i-j| <= W/2 and (i-j) is a multiple of D. Blocks are
an execution strategy, never a semantic boundary; windows clip at the
sequence edges and never wrap.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import DTYPE, MaskError, ShapeError, Tensor, _wrap, record

NEG_INF = np.float32(-np.inf)


@dataclass(frozen=True)
class AttentionSpec:
    """How each query selects its keys.

    mode "dense" attends everything; "windowed" attends +-window/2
    neighbours, thinned to every dilation-th offset.
    """

    mode: str = "dense"
    window: int = 0
    dilation: int = 1
    heads: int = 1

    def __post_init__(self):
        if self.mode not in ("dense", "windowed"):
            raise ValueError(f"unknown attention mode {self.mode!r}")
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if self.mode == "windowed":
            if self.window < 2 or self.window % 2 != 0:
                raise ValueError(f"window must be even and >= 2, got {self.window}")
            if self.dilation < 1:
                raise ValueError(f"dilation must be >= 1, got {self.dilation}")

    @property
    def half(self) -> int:
        return self.window // 2

    def offsets(self) -> np.ndarray:
        """Signed key offsets an interior query attends, ascending."""
        if self.mode == "dense":
            raise ValueError("offsets() only defined for windowed mode")
        reach = self.dilation * (self.half // self.dilation)
        return np.arange(-reach, reach + 1, self.dilation, dtype=np.int64)


def keys_per_interior_query(spec: AttentionSpec) -> int:
    """2*floor((W/2)/D) + 1: window slots an un-clipped query actually uses."""
    return 2 * (spec.half // spec.dilation) + 1


class AttendancePattern:
    """Allowed key indices per query for a sequence of length n."""

    def __init__(self, n: int, spec: AttentionSpec):
        if n < 1:
            raise ValueError(f"sequence length must be >= 1, got {n}")
        self.n = n
        self.spec = spec

    def allowed(self, i: int) -> np.ndarray:
        if not 0 <= i < self.n:
            raise IndexError(f"query {i} out of range for length {self.n}")
        if self.spec.mode == "dense":
            return np.arange(self.n, dtype=np.int64)
        js = i + self.spec.offsets()
        return js[(js >= 0) & (js < self.n)]

    def counts(self) -> np.ndarray:
        """|allowed(i)| for every query, computed in closed form."""
        if self.spec.mode == "dense":
            return np.full(self.n, self.n, dtype=np.int64)
        i = np.arange(self.n, dtype=np.int64)
        h, d = self.spec.half, self.spec.dilation
        left = np.minimum(h, i) // d
        right = np.minimum(h, self.n - 1 - i) // d
        return left + right + 1

    def mask(self) -> np.ndarray:
        """Dense (n, n) boolean mask; True where attention is allowed."""
        if self.spec.mode == "dense":
            return np.ones((self.n, self.n), dtype=bool)
        i = np.arange(self.n)[:, None]
        j = np.arange(self.n)[None, :]
        diff = i - j
        return (np.abs(diff) <= self.spec.half) & (diff % self.spec.dilation == 0)


def build_pattern(n: int, spec: AttentionSpec) -> AttendancePattern:
    return AttendancePattern(n, spec)


# ---------------------------------------------------------------------------
# score-buffer allocation accounting
# ---------------------------------------------------------------------------

_SCORE_ALLOC = 0


def _count_scores(entries: int) -> None:
    global _SCORE_ALLOC
    _SCORE_ALLOC += entries


@contextmanager
def track_score_alloc():
    """Capture the number of score-buffer entries kernels allocate."""

    class _Tracker:
        entries = 0

    before = _SCORE_ALLOC
    t = _Tracker()
    try:
        yield t
    finally:
        t.entries = _SCORE_ALLOC - before


# ---------------------------------------------------------------------------
# dense attention (self, masked-reference, cross)
# ---------------------------------------------------------------------------


def _split_heads(t: Tensor, heads: int) -> np.ndarray:
    n, d = t.data.shape
    if d % heads != 0:
        raise ShapeError(f"model width {d} not divisible by {heads} heads")
    return t.data.reshape(n, heads, d // heads)


def _dense_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    allowed: Optional[np.ndarray],
    key_mask: Optional[np.ndarray],
) -> Tensor:
    if k.data.shape != v.data.shape:
        raise ShapeError(f"K and V must match: {k.data.shape} vs {v.data.shape}")
    if q.data.shape[1] != k.data.shape[1]:
        raise ShapeError(
            f"query width {q.data.shape} incompatible with keys {k.data.shape}"
        )
    L, N = q.data.shape[0], k.data.shape[0]
    dh = q.data.shape[1] // heads
    # (H, len, dh) layouts so scores/outputs run as batched BLAS matmuls
    qh = np.ascontiguousarray(_split_heads(q, heads).transpose(1, 0, 2))
    kh = np.ascontiguousarray(_split_heads(k, heads).transpose(1, 0, 2))
    vh = np.ascontiguousarray(_split_heads(v, heads).transpose(1, 0, 2))
    H = heads
    scale = 1.0 / math.sqrt(dh)

    mask = np.ones((L, N), dtype=bool) if allowed is None else np.asarray(allowed, bool)
    if mask.shape != (L, N):
        raise ShapeError(f"mask shape {mask.shape} must be ({L}, {N})")
    if key_mask is not None:
        mask = mask & np.asarray(key_mask, dtype=bool)[None, :]
    if not mask.any(axis=1).all():
        raise MaskError("attention row with no allowed keys")

    scores = qh @ kh.transpose(0, 2, 1)  # (H, L, N)
    _count_scores(scores.size)
    scores *= scale
    if not mask.all():
        scores[:, ~mask] = NEG_INF
    np.subtract(scores, scores.max(axis=2, keepdims=True), out=scores)
    np.exp(scores, out=scores)
    denom = scores.sum(axis=2, keepdims=True, dtype=np.float64)
    np.divide(scores, denom, out=scores)
    weights = scores  # softmaxed in place

    out_h = weights @ vh  # (H, L, dh)
    out = _wrap(out_h.transpose(1, 0, 2).reshape(L, H * dh))

    def vjp(g):
        go = np.ascontiguousarray(g.reshape(L, H, dh).transpose(1, 0, 2))
        gw = go @ vh.transpose(0, 2, 1)  # (H, L, N)
        inner = (gw * weights).sum(axis=2, keepdims=True, dtype=np.float64)
        gs = (weights * (gw - inner)).astype(DTYPE)
        gq = (gs @ kh) * scale
        gk = (gs.transpose(0, 2, 1) @ qh) * scale
        gv = weights.transpose(0, 2, 1) @ go
        return (
            np.ascontiguousarray(gq.transpose(1, 0, 2)).reshape(L, H * dh),
            np.ascontiguousarray(gk.transpose(1, 0, 2)).reshape(N, H * dh),
            np.ascontiguousarray(gv.transpose(1, 0, 2)).reshape(N, H * dh),
        )

    return record(out, (q, k, v), vjp)


def dense_mha(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    spec: AttentionSpec,
    extra_mask: Optional[np.ndarray] = None,
    key_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Scaled dot-product self-attention over all key positions."""
    if q.data.shape != k.data.shape:
        raise ShapeError(
            f"self-attention needs equal Q/K shapes: {q.data.shape} vs {k.data.shape}"
        )
    return _dense_attention(q, k, v, spec.heads, extra_mask, key_mask)


def restricted_mha_reference(
    q: Tensor, k: Tensor, v: Tensor, spec: AttentionSpec
) -> Tensor:
    """Windowed attention as a dense kernel plus pattern mask.

    Semantics oracle for the blocked kernel; keeps O(N^2) score memory.
    """
    if spec.mode != "windowed":
        raise ValueError("restricted attention requires a windowed spec")
    mask = build_pattern(q.data.shape[0], spec).mask()
    return _dense_attention(q, k, v, spec.heads, mask, None)


def cross_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    key_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Dense attention from decoder queries onto encoder keys."""
    return _dense_attention(q, k, v, heads, None, key_mask)


# ---------------------------------------------------------------------------
# blocked windowed kernel
# ---------------------------------------------------------------------------


def _band_view(pad: np.ndarray, start: int, rows: int, n_off: int, step: int):
    """Read-only view pad[start + r + step*m] for r < rows, m < n_off."""
    s0, s1, s2 = pad.strides
    return np.lib.stride_tricks.as_strided(
        pad[start:],
        shape=(rows, n_off, pad.shape[1], pad.shape[2]),
        strides=(s0, step * s0, s1, s2),
        writeable=False,
    )


def restricted_mha_blocked(
    q: Tensor, k: Tensor, v: Tensor, spec: AttentionSpec
) -> Tensor:
    """Windowed attention in ceil(N/W) query blocks with banded score buffers.

    Each block of up to W queries reads keys from [block_start - W/2,
    block_end + W/2); inside the block every query keeps exactly its
    allowed key slots, so a call allocates at most N*(W/D+1) score
    entries per head instead of N^2.
    """
    if spec.mode != "windowed":
        raise ValueError("restricted attention requires a windowed spec")
    if q.data.shape != k.data.shape or k.data.shape != v.data.shape:
        raise ShapeError(
            f"self-attention needs equal Q/K/V shapes: "
            f"{q.data.shape}, {k.data.shape}, {v.data.shape}"
        )
    qh = _split_heads(q, spec.heads)
    kh = _split_heads(k, spec.heads)
    vh = _split_heads(v, spec.heads)
    N, H, dh = qh.shape
    W, D, h = spec.window, spec.dilation, spec.half
    scale = 1.0 / math.sqrt(dh)
    offsets = spec.offsets()
    n_off = len(offsets)
    reach = int(offsets[-1])  # D * floor(h / D)
    view_start = h - reach  # pad row of the first offset for query 0

    # zero padding gives out-of-range window slots a defined read target;
    # their scores are forced to -inf below before the softmax
    kpad = np.zeros((N + 2 * h, H, dh), dtype=DTYPE)
    vpad = np.zeros((N + 2 * h, H, dh), dtype=DTYPE)
    kpad[h : h + N] = kh
    vpad[h : h + N] = vh

    n_blocks = -(-N // W)
    weights_blocks: list[np.ndarray] = []
    out = np.empty((N, H, dh), dtype=DTYPE)
    for b in range(n_blocks):
        s, e = b * W, min((b + 1) * W, N)
        bq = e - s
        kwin = _band_view(kpad, s + view_start, bq, n_off, D)
        scores = np.einsum("qhd,qohd->qoh", qh[s:e], kwin)
        _count_scores(scores.size)
        scores *= scale
        if s < reach or e > N - reach:  # boundary block: clip the window
            pos = (np.arange(s, e)[:, None] + offsets[None, :])  # (bq, n_off)
            scores[(pos < 0) | (pos >= N)] = NEG_INF
        np.subtract(scores, scores.max(axis=1, keepdims=True), out=scores)
        np.exp(scores, out=scores)
        denom = scores.sum(axis=1, keepdims=True, dtype=np.float64)
        np.divide(scores, denom, out=scores)
        weights_blocks.append(scores)
        vwin = _band_view(vpad, s + view_start, bq, n_off, D)
        out[s:e] = np.einsum("qoh,qohd->qhd", scores, vwin)

    result = _wrap(out.reshape(N, H * dh))

    def vjp(g):
        go = g.reshape(N, H, dh)
        gq = np.empty((N, H, dh), dtype=DTYPE)
        gkpad = np.zeros((N + 2 * h, H, dh), dtype=DTYPE)
        gvpad = np.zeros((N + 2 * h, H, dh), dtype=DTYPE)
        r2 = 2 * reach
        for b in range(n_blocks):
            s, e = b * W, min((b + 1) * W, N)
            bq = e - s
            w = weights_blocks[b]
            vwin = _band_view(vpad, s + view_start, bq, n_off, D)
            gw = np.einsum("qhd,qohd->qoh", go[s:e], vwin)
            inner = (gw * w).sum(axis=1, keepdims=True, dtype=np.float64)
            gs = (w * (gw - inner)).astype(DTYPE)
            kwin = _band_view(kpad, s + view_start, bq, n_off, D)
            gq[s:e] = np.einsum("qoh,qohd->qhd", gs, kwin) * scale

            # key j receives from queries i = j - offset; with symmetric
            # offsets that is again a band, read via reverse-strided views
            # of zero-padded per-block buffers
            rows = bq + 2 * r2
            wp = np.zeros((rows, n_off, H), dtype=DTYPE)
            gsp = np.zeros((rows, n_off, H), dtype=DTYPE)
            gop = np.zeros((rows, H, dh), dtype=DTYPE)
            qp = np.zeros((rows, H, dh), dtype=DTYPE)
            wp[r2 : r2 + bq] = w
            gsp[r2 : r2 + bq] = gs
            gop[r2 : r2 + bq] = go[s:e]
            qp[r2 : r2 + bq] = qh[s:e]
            bk = bq + r2
            s0, s1, s2 = wp.strides
            r0, r1a, r1b = gop.strides
            band = (bk, n_off, H)
            wT = np.lib.stride_tricks.as_strided(
                wp[r2:], band, (s0, s1 - D * s0, s2), writeable=False
            )
            gsT = np.lib.stride_tricks.as_strided(
                gsp[r2:], band, (s0, s1 - D * s0, s2), writeable=False
            )
            goT = np.lib.stride_tricks.as_strided(
                gop[r2:], (bk, n_off, H, dh), (r0, -D * r0, r1a, r1b), writeable=False
            )
            qT = np.lib.stride_tricks.as_strided(
                qp[r2:], (bk, n_off, H, dh), (r0, -D * r0, r1a, r1b), writeable=False
            )
            keys = slice(s - reach + h, e + reach + h)
            gvpad[keys] += np.einsum("jmh,jmhd->jhd", wT, goT)
            gkpad[keys] += np.einsum("jmh,jmhd->jhd", gsT, qT) * scale
        return (
            gq.reshape(N, H * dh),
            gkpad[h : h + N].reshape(N, H * dh),
            gvpad[h : h + N].reshape(N, H * dh),
        )

    return record(result, (q, k, v), vjp)


def restricted_mha(q: Tensor, k: Tensor, v: Tensor, spec: AttentionSpec) -> Tensor:
    """Windowed self-attention via the blocked kernel (production path)."""
    return restricted_mha_blocked(q, k, v, spec)


# ---------------------------------------------------------------------------
# complexity accounting
# ---------------------------------------------------------------------------


def flops_estimate(
    n: int,
    out_len: int,
    spec: AttentionSpec,
    d_model: int,
    layers_enc: int,
    layers_dec: int,
) -> dict[str, int]:
    """Attention FLOP counts for one forward pass.

    Encoder self-attention pays 4*d_model per allowed query/key pair
    (QK^T plus AV, multiply and add); the allowed-pair total is N^2 for
    dense mode and the exact clipped window count otherwise. Decoder
    self-attention and cross-attention keep their quadratic/bilinear
    shapes in the output length.
    """
    pairs = int(build_pattern(n, spec).counts().sum())
    return {
        "enc_self": 4 * d_model * pairs * layers_enc,
        "dec_self": 4 * d_model * out_len * out_len * layers_dec,
        "cross": 4 * d_model * n * out_len * layers_dec,
    }
