from collections import Counter
from functools import lru_cache

import numpy as np
import pytest

from speechsum import metrics as mx


# --- independent brute-force oracles ---------------------------------------


def edit_distance_matrix(ref, hyp):
    """Plain DP over the full matrix, distance only."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=int)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(
                d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                d[i - 1, j] + 1,
                d[i, j - 1] + 1,
            )
    return int(d[n, m])


def recursive_lcs(a, b):
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == 0 or j == 0:
            return 0
        if a[i - 1] == b[j - 1]:
            return go(i - 1, j - 1) + 1
        return max(go(i - 1, j), go(i, j - 1))

    return go(len(a), len(b))


def naive_rouge_n(ref, hyp, n):
    ref_grams = Counter(tuple(ref[i : i + n]) for i in range(len(ref) - n + 1))
    hyp_grams = Counter(tuple(hyp[i : i + n]) for i in range(len(hyp) - n + 1))
    if not ref_grams or not hyp_grams:
        return 0.0
    overlap = sum(min(c, ref_grams[g]) for g, c in hyp_grams.items())
    p = overlap / sum(hyp_grams.values())
    r = overlap / sum(ref_grams.values())
    return 200.0 * p * r / (p + r) if p + r else 0.0


def random_tokens(r, max_len=12, vocab=("a", "b", "c", "d", "e")):
    return [vocab[i] for i in r.integers(0, len(vocab), size=r.integers(0, max_len + 1))]


# --- WER --------------------------------------------------------------------


class TestWer:
    def test_identical(self):
        value, counts = mx.wer("a b c".split(), "a b c".split())
        assert value == 0.0 and counts.total == 0

    def test_single_deletion(self):
        value, counts = mx.wer("a b c".split(), "a c".split())
        assert counts.deletions == 1 and counts.total == 1
        assert value == pytest.approx(100.0 / 3.0)

    def test_can_exceed_100(self):
        value, counts = mx.wer(["a"], "b c".split())
        assert counts.substitutions == 1 and counts.insertions == 1
        assert value == 200.0

    def test_empty_ref_rejected(self):
        with pytest.raises(ValueError):
            mx.wer([], ["a"])

    @pytest.mark.parametrize("seed", range(40))
    def test_counts_witness_minimal_distance(self, seed):
        r = np.random.default_rng(seed)
        ref = random_tokens(r) or ["a"]
        hyp = random_tokens(r)
        _, counts = mx.wer(ref, hyp)
        assert counts.total == edit_distance_matrix(ref, hyp)

    @pytest.mark.parametrize("seed", range(15))
    def test_distance_symmetry_swaps_roles(self, seed):
        r = np.random.default_rng(100 + seed)
        a = random_tokens(r) or ["a"]
        b = random_tokens(r) or ["b"]
        _, fwd = mx.wer(a, b)
        _, rev = mx.wer(b, a)
        assert fwd.total == rev.total
        assert (fwd.deletions, fwd.insertions) == (rev.insertions, rev.deletions)


# --- ROUGE -------------------------------------------------------------------


class TestRougeN:
    def test_identical(self):
        assert mx.rouge_n("x y z".split(), "x y z".split(), 1) == 100.0
        assert mx.rouge_n("x y z".split(), "x y z".split(), 2) == 100.0

    def test_half_recall(self):
        got = mx.rouge_n("a b c d".split(), "a c".split(), 1)
        # P=1, R=0.5 -> F1 = 2/3
        assert got == pytest.approx(200.0 / 3.0)

    def test_no_overlap(self):
        assert mx.rouge_n("a b".split(), "c d".split(), 2) == 0.0

    def test_empty_sides(self):
        assert mx.rouge_n([], "a b".split(), 1) == 0.0
        assert mx.rouge_n(["a"], ["a"], 2) == 0.0  # too short for bigrams

    @pytest.mark.parametrize("seed", range(40))
    @pytest.mark.parametrize("n", [1, 2])
    def test_matches_naive_dictionaries(self, seed, n):
        r = np.random.default_rng(seed)
        ref, hyp = random_tokens(r), random_tokens(r)
        assert mx.rouge_n(ref, hyp, n) == pytest.approx(
            naive_rouge_n(ref, hyp, n), abs=1e-9
        )


class TestRougeL:
    def test_identical(self):
        assert mx.rouge_l("p q r".split(), "p q r".split()) == 100.0

    def test_subsequence(self):
        got = mx.rouge_l("a b c d".split(), "a c".split())
        # lcs=2: R=0.5, P=1.0 -> F1 = 2/3
        assert got == pytest.approx(200.0 / 3.0)

    def test_disjoint(self):
        assert mx.rouge_l("a b".split(), "c d".split()) == 0.0

    @pytest.mark.parametrize("seed", range(40))
    def test_matches_recursive_lcs(self, seed):
        r = np.random.default_rng(seed)
        ref, hyp = random_tokens(r), random_tokens(r)
        if not ref or not hyp:
            assert mx.rouge_l(ref, hyp) == 0.0
            return
        lcs = recursive_lcs(tuple(ref), tuple(hyp))
        p, rr = lcs / len(hyp), lcs / len(ref)
        expected = 200.0 * p * rr / (p + rr) if p + rr else 0.0
        assert mx.rouge_l(ref, hyp) == pytest.approx(expected, abs=1e-9)

    @pytest.mark.parametrize("seed", range(10))
    def test_argument_swap_swaps_p_and_r(self, seed):
        r = np.random.default_rng(seed)
        a = random_tokens(r) or ["a"]
        b = random_tokens(r) or ["b"]
        assert mx.rouge_l(a, b) == pytest.approx(mx.rouge_l(b, a), abs=1e-9)


# --- concepts ----------------------------------------------------------------


class TestConceptPrf:
    def test_partial_overlap(self):
        res = mx.concept_prf({"a", "b", "c"}, {"b", "c", "d"})
        assert res.precision == pytest.approx(200.0 / 3.0)
        assert res.recall == pytest.approx(200.0 / 3.0)
        assert res.f1 == pytest.approx(200.0 / 3.0)

    def test_exact_match(self):
        res = mx.concept_prf({"x", "y"}, {"x", "y"})
        assert (res.precision, res.recall, res.f1) == (100.0, 100.0, 100.0)

    def test_disjoint(self):
        res = mx.concept_prf({"a"}, {"b"})
        assert (res.precision, res.recall, res.f1) == (0.0, 0.0, 0.0)

    def test_empty_pred_flagged(self):
        res = mx.concept_prf(set(), {"a"})
        assert res.empty_pred and res.f1 == 0.0

    def test_sequences_are_deduplicated(self):
        res = mx.concept_prf(["a", "a", "b"], ["b", "b", "a"])
        assert res.f1 == 100.0


# --- corpus aggregation --------------------------------------------------------


class TestCorpus:
    def test_wer_pools_counts(self):
        refs = ["a b".split(), "c".split()]
        hyps = ["a x".split(), "c".split()]
        rep = mx.corpus_wer(refs, hyps)
        assert rep.numerator == 1 and rep.denominator == 3
        assert rep.value == rep.recompute() == pytest.approx(100.0 / 3.0)

    def test_rouge_macro_mean(self):
        refs = ["a b".split(), "c d".split()]
        hyps = ["a b".split(), "x y".split()]
        rep = mx.corpus_rouge(refs, hyps, "1")
        assert rep.value == pytest.approx(50.0)
        assert rep.value == rep.recompute()

    def test_concept_micro_average(self):
        preds = [{"a", "b"}, {"c"}]
        refs = [{"a"}, {"c", "d"}]
        reps = mx.corpus_concept_prf(preds, refs)
        assert reps["precision"].value == pytest.approx(200.0 / 3.0)
        assert reps["recall"].value == pytest.approx(200.0 / 3.0)
        for rep in reps.values():
            assert rep.value == rep.recompute()

    def test_micro_differs_from_macro_when_sizes_vary(self):
        preds = [{"a"}, {"b", "c", "d", "e"}]
        refs = [{"a"}, {"z"}]
        reps = mx.corpus_concept_prf(preds, refs)
        assert reps["precision"].value == pytest.approx(100.0 / 5.0)

    def test_tokenize(self):
        assert mx.tokenize(" The  cat SAT ") == ["the", "cat", "sat"]
