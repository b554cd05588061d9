"""Training objectives: CTC, label-smoothed cross-entropy, joint mix.

CTC is the log-space forward algorithm over blank-interleaved states.
Its gradient is obtained by differentiating back through the stored
forward recursion (no separate beta pass), which is exact under
reverse mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, Tensor, _wrap, add, record, scale

NEG_INF = -np.inf


@dataclass(frozen=True)
class JointLossSpec:
    """Weighting between the CTC and attention branches."""

    ctc_weight: float = 0.3
    label_smoothing: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError(f"ctc_weight must be in [0,1], got {self.ctc_weight}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(
                f"label_smoothing must be in [0,1), got {self.label_smoothing}"
            )


class InfeasibleTarget(ValueError):
    """Target cannot be aligned within the given number of frames."""


def _expand_with_blanks(target: np.ndarray, blank: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def _shift(a: np.ndarray, by: int) -> np.ndarray:
    out = np.full_like(a, NEG_INF)
    out[by:] = a[:-by] if by else a
    return out


def ctc_loss(log_probs: Tensor, target, blank: int = 1) -> Tensor:
    """-log p(target | frame log-probabilities), summed over all monotonic
    blank-augmented alignments.

    ``log_probs`` is (T, V) with the blank column included; ``target``
    holds label ids without blanks.
    """
    tgt = np.asarray(target, dtype=np.int64)
    T, V = log_probs.data.shape
    if tgt.ndim != 1:
        raise ValueError("target must be a flat token sequence")
    if np.any(tgt == blank):
        raise ValueError("target may not contain the blank id")
    if np.any((tgt < 0) | (tgt >= V)):
        raise ValueError("target id out of vocabulary range")
    L = len(tgt)
    min_frames = L + int(np.sum(tgt[1:] == tgt[:-1]))
    if T < min_frames:
        raise InfeasibleTarget(f"{L} labels need at least {min_frames} frames, got {T}")

    ext = _expand_with_blanks(tgt, blank)
    S = len(ext)
    # skip transition s-2 -> s allowed between distinct non-blank labels
    can_skip = np.zeros(S, dtype=bool)
    if S > 2:
        can_skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    lp = log_probs.data.astype(np.float64)
    frame = lp[:, ext]  # (T, S) per-state emission scores
    alpha = np.full((T, S), NEG_INF)
    alpha[0, : min(2, S)] = frame[0, : min(2, S)]
    with np.errstate(invalid="ignore", over="ignore"):
        for t in range(1, T):
            prev = alpha[t - 1]
            step = _shift(prev, 1)
            skip = np.where(can_skip, _shift(prev, 2), NEG_INF)
            m = np.maximum(np.maximum(prev, step), skip)
            live = m > NEG_INF
            # dead entries produce nan here and are masked right after
            total = np.exp(prev - m) + np.exp(step - m) + np.exp(skip - m)
            alpha[t] = np.where(live, m + np.log(total) + frame[t], NEG_INF)

    tail = alpha[T - 1, max(0, S - 2) :]
    m = tail.max()
    if m == NEG_INF:
        raise InfeasibleTarget("no feasible alignment for this target")
    final = m + np.log(np.exp(tail - m).sum())
    out = _wrap(-final)

    def vjp(g):
        gl = float(g.reshape(()))
        g_alpha = np.zeros(S)
        g_alpha[max(0, S - 2) :] = -gl * np.exp(tail - final)

        g_frame = np.zeros((T, S))
        with np.errstate(invalid="ignore", over="ignore"):
            for t in range(T - 1, 0, -1):
                g_frame[t] = g_alpha
                live = np.isfinite(alpha[t])  # g_alpha is zero on dead states
                # +inf sentinel makes every weight into a dead state exactly 0
                lse = np.where(live, alpha[t] - frame[t], np.inf)
                prev = alpha[t - 1]
                g_prev = g_alpha * np.exp(prev - lse)
                g_prev[:-1] += (g_alpha * np.exp(_shift(prev, 1) - lse))[1:]
                if S > 2:
                    skip = np.where(can_skip, _shift(prev, 2), NEG_INF)
                    g_prev[:-2] += (g_alpha * np.exp(skip - lse))[2:]
                g_alpha = g_prev
        g_frame[0, : min(2, S)] = g_alpha[: min(2, S)]
        g_lp = np.zeros((T, V))
        np.add.at(g_lp, (np.arange(T)[:, None], ext[None, :]), g_frame)
        return (g_lp.astype(DTYPE),)

    return record(out, (log_probs,), vjp)


def label_smoothed_ce(logits: Tensor, target, smoothing: float, pad: int = 0) -> Tensor:
    """KL divergence from the smoothed one-hot target distribution to the
    predicted distribution, averaged over non-pad positions."""
    tgt = np.asarray(target, dtype=np.int64)
    L, V = logits.data.shape
    if tgt.shape != (L,):
        raise ValueError(f"target length {tgt.shape} must match logits rows {L}")
    if np.any(tgt >= V) or np.any(tgt < 0):
        raise ValueError("target id out of vocabulary range")
    keep = tgt != pad
    n = int(keep.sum())
    if n == 0:
        raise ValueError("no non-pad target positions")

    x = logits.data.astype(np.float64)
    x = x - x.max(axis=1, keepdims=True)
    logp = x - np.log(np.exp(x).sum(axis=1, keepdims=True))

    on = 1.0 - smoothing
    off = smoothing / (V - 1) if V > 1 else 0.0
    q = np.full((L, V), off)
    q[np.arange(L), tgt] = on
    # KL(q || p) = -H(q) - sum q log p ; 0 log 0 = 0
    neg_entropy = on * np.log(on) if on > 0 else 0.0
    if off > 0:
        neg_entropy += (V - 1) * off * np.log(off)
    per_pos = neg_entropy - (q * logp).sum(axis=1)
    out = _wrap(per_pos[keep].sum() / n)
    probs = np.exp(logp)

    def vjp(g):
        gl = float(g.reshape(()))
        grad = (probs - q) * (gl / n)
        grad[~keep] = 0.0
        return (grad.astype(DTYPE),)

    return record(out, (logits,), vjp)


def joint_loss(ctc: Tensor, att: Tensor, ctc_weight: float) -> Tensor:
    """ctc_weight * ctc + (1 - ctc_weight) * attention loss."""
    if not (np.isfinite(ctc.data).all() and np.isfinite(att.data).all()):
        raise ValueError("joint_loss requires finite branch losses")
    return add(scale(ctc, ctc_weight), scale(att, 1.0 - ctc_weight))
