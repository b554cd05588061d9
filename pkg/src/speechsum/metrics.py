"""Evaluation metrics: WER, ROUGE-1/2/L, concept precision/recall/F1.

Values follow the percent convention. Tokenization for every metric is
lowercase + whitespace split; no stemming or stopword filtering, so
numbers are internally consistent rather than tool-compatible.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence


@dataclass(frozen=True)
class MetricReport:
    """A metric value plus the counts needed to recompute it.

    Every report is a ratio: value == 100 * numerator / denominator
    (0 when the denominator is 0).
    """

    name: str
    value: float
    numerator: float
    denominator: float
    note: str = ""

    def recompute(self) -> float:
        return _ratio(self.numerator, self.denominator)

    def as_dict(self) -> dict:
        d = {
            "name": self.name,
            "value": self.value,
            "numerator": self.numerator,
            "denominator": self.denominator,
        }
        if self.note:
            d["note"] = self.note
        return d


def _ratio(num: float, den: float) -> float:
    return 100.0 * num / den if den else 0.0


def tokenize(text: str) -> list[str]:
    return text.lower().split()


# ---------------------------------------------------------------------------
# word error rate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EditCounts:
    substitutions: int
    deletions: int
    insertions: int

    @property
    def total(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def wer(ref: Sequence[str], hyp: Sequence[str]) -> tuple[float, EditCounts]:
    """Word error rate: 100 * (S+D+I) / |ref| under uniform edit costs.

    The (S, D, I) split is one witness of the minimal distance; ties are
    broken preferring substitution/match over deletion over insertion.
    """
    if len(ref) == 0:
        raise ValueError("WER needs a non-empty reference")
    n, m = len(ref), len(hyp)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dist[i][0] = i
    for j in range(1, m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1])
            dele = dist[i - 1][j] + 1
            ins = dist[i][j - 1] + 1
            dist[i][j] = min(sub, dele, ins)

    subs = dels = inss = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] + (
            ref[i - 1] != hyp[j - 1]
        ):
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dist[i][j] == dist[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            inss += 1
            j -= 1
    counts = EditCounts(subs, dels, inss)
    return _ratio(counts.total, n), counts


# ---------------------------------------------------------------------------
# ROUGE
# ---------------------------------------------------------------------------


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(ref: Sequence[str], hyp: Sequence[str], n: int) -> float:
    """F1 over clipped n-gram overlap; 0 when either side has no n-grams."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    ref_grams = _ngrams(ref, n)
    hyp_grams = _ngrams(hyp, n)
    r_total = sum(ref_grams.values())
    h_total = sum(hyp_grams.values())
    if r_total == 0 or h_total == 0:
        return 0.0
    overlap = sum(min(c, ref_grams[g]) for g, c in hyp_grams.items())
    # F1 = 2PR/(P+R) collapses to 2c / (|hyp grams| + |ref grams|)
    return _ratio(2 * overlap, h_total + r_total)


def _lcs_len(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(ref: Sequence[str], hyp: Sequence[str]) -> float:
    """F1 (beta=1) from longest-common-subsequence recall and precision."""
    if len(ref) == 0 or len(hyp) == 0:
        return 0.0
    lcs = _lcs_len(ref, hyp)
    return _ratio(2 * lcs, len(ref) + len(hyp))


# ---------------------------------------------------------------------------
# concept sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PrfResult:
    precision: float
    recall: float
    f1: float
    empty_pred: bool = False


def concept_prf(pred: Iterable[str], ref: Iterable[str]) -> PrfResult:
    """Set precision/recall/F1 between deduplicated concept collections."""
    p_set, r_set = set(pred), set(ref)
    if not p_set:
        return PrfResult(0.0, 0.0, 0.0, empty_pred=True)
    inter = len(p_set & r_set)
    precision = _ratio(inter, len(p_set))
    recall = _ratio(inter, len(r_set)) if r_set else 0.0
    f1 = _ratio(2 * inter, len(p_set) + len(r_set))
    return PrfResult(precision, recall, f1)


# ---------------------------------------------------------------------------
# corpus aggregation
# ---------------------------------------------------------------------------


def corpus_wer(refs: Sequence[Sequence[str]], hyps: Sequence[Sequence[str]]) -> MetricReport:
    """Pooled WER: edit counts summed over the corpus before dividing."""
    errors = 0
    ref_len = 0
    for ref, hyp in zip(refs, hyps, strict=True):
        _, counts = wer(ref, hyp)
        errors += counts.total
        ref_len += len(ref)
    return MetricReport("wer", _ratio(errors, ref_len), errors, ref_len)


def corpus_rouge(
    refs: Sequence[Sequence[str]], hyps: Sequence[Sequence[str]], kind: str
) -> MetricReport:
    """Mean per-pair ROUGE F1 ("1", "2", or "l")."""
    if kind == "l":
        scores = [rouge_l(r, h) for r, h in zip(refs, hyps, strict=True)]
    elif kind in ("1", "2"):
        scores = [rouge_n(r, h, int(kind)) for r, h in zip(refs, hyps, strict=True)]
    else:
        raise ValueError(f"unknown rouge kind {kind!r}")
    total = sum(s / 100.0 for s in scores)
    return MetricReport(f"rouge-{kind}", _ratio(total, len(scores)), total, len(scores))


def corpus_concept_prf(
    preds: Sequence[Iterable[str]], refs: Sequence[Iterable[str]]
) -> dict[str, MetricReport]:
    """Micro-averaged concept P/R/F1: intersections and set sizes are
    summed over the corpus before dividing."""
    inter = pred_total = ref_total = 0
    empty_preds = 0
    for pred, ref in zip(preds, refs, strict=True):
        p_set, r_set = set(pred), set(ref)
        if not p_set:
            empty_preds += 1
        inter += len(p_set & r_set)
        pred_total += len(p_set)
        ref_total += len(r_set)
    note = f"{empty_preds} empty prediction sets" if empty_preds else ""
    return {
        "precision": MetricReport(
            "concept-precision", _ratio(inter, pred_total), inter, pred_total, note
        ),
        "recall": MetricReport(
            "concept-recall", _ratio(inter, ref_total), inter, ref_total, note
        ),
        "f1": MetricReport(
            "concept-f1",
            _ratio(2 * inter, pred_total + ref_total),
            2 * inter,
            pred_total + ref_total,
            note,
        ),
    }
