import itertools
import math

import numpy as np
import pytest

from speechsum import losses as ls
from speechsum import tensor as tz
from util import check_grads

BLANK = 1


def brute_force_ctc(log_probs, target, blank=BLANK):
    """Sum path probabilities over every V^T alignment, f64."""
    T, V = log_probs.shape
    probs = np.exp(log_probs.astype(np.float64))
    target = list(target)
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        collapsed = [s for i, s in enumerate(path) if i == 0 or s != path[i - 1]]
        labels = [s for s in collapsed if s != blank]
        if labels == target:
            p = 1.0
            for t, s in enumerate(path):
                p *= probs[t, s]
            total += p
    return -math.log(total)


def random_log_probs(r, t, v):
    x = r.normal(size=(t, v)).astype(np.float64) * 2
    x -= x.max(axis=1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=1, keepdims=True))


class TestCtcLoss:
    def test_single_frame_single_label(self):
        lp = random_log_probs(np.random.default_rng(0), 1, 3)
        loss = ls.ctc_loss(tz.tensor(lp), [2])
        assert loss.item() == pytest.approx(-lp[0, 2], abs=1e-6)

    def test_two_frames_uniform_third(self):
        # paths (a,a), (a,-), (-,a) each 1/9 -> p = 3/9
        lp = np.log(np.full((2, 3), 1.0 / 3.0))
        loss = ls.ctc_loss(tz.tensor(lp), [0])
        assert loss.item() == pytest.approx(-math.log(3.0 / 9.0), abs=1e-6)

    @pytest.mark.parametrize("seed", range(30))
    def test_matches_brute_force(self, seed):
        r = np.random.default_rng(seed)
        t = int(r.integers(1, 7))
        v = int(r.integers(2, 5))
        tokens = [i for i in range(v) if i != BLANK]
        max_l = min(3, t)
        lab = list(r.choice(tokens, size=int(r.integers(1, max_l + 1))))
        lp = random_log_probs(r, t, v)
        try:
            got = ls.ctc_loss(tz.tensor(lp), lab).item()
        except ls.InfeasibleTarget:
            assert t < len(lab) + sum(
                1 for a, b in zip(lab, lab[1:]) if a == b
            )
            return
        assert got == pytest.approx(brute_force_ctc(lp, lab), abs=1e-6)
        assert got >= 0.0

    def test_blank_in_target_rejected(self):
        lp = random_log_probs(np.random.default_rng(1), 3, 4)
        with pytest.raises(ValueError):
            ls.ctc_loss(tz.tensor(lp), [0, BLANK])

    def test_infeasible_rejected(self):
        lp = random_log_probs(np.random.default_rng(2), 1, 4)
        with pytest.raises(ls.InfeasibleTarget):
            ls.ctc_loss(tz.tensor(lp), [0, 2])
        with pytest.raises(ls.InfeasibleTarget):
            ls.ctc_loss(
                tz.tensor(random_log_probs(np.random.default_rng(3), 2, 4)), [0, 0]
            )

    def test_finite_for_long_feasible_target(self):
        r = np.random.default_rng(4)
        lab = list(r.choice([0, 2, 3], size=20))
        lp = random_log_probs(r, 64, 4)
        assert math.isfinite(ls.ctc_loss(tz.tensor(lp), lab).item())

    @pytest.mark.parametrize("seed", range(6))
    def test_grad_matches_finite_differences(self, seed):
        r = np.random.default_rng(100 + seed)
        lp = tz.param(random_log_probs(r, 4, 3))
        lab = list(r.choice([0, 2], size=int(r.integers(1, 3))))
        check_grads(lambda: ls.ctc_loss(lp, lab), [lp], tol=1e-3)


class TestLabelSmoothedCE:
    def test_confident_correct_logits_vanish(self):
        logits = tz.tensor([[50.0, 0.0, 0.0], [0.0, 50.0, 0.0]])
        loss = ls.label_smoothed_ce(logits, [0, 1], smoothing=0.0, pad=-1)
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_zero_smoothing_equals_cross_entropy(self):
        r = np.random.default_rng(5)
        raw = r.normal(size=(4, 6))
        logits = tz.tensor(raw)
        tgt = [2, 5, 1, 3]
        got = ls.label_smoothed_ce(logits, tgt, smoothing=0.0, pad=-1).item()
        x = raw - raw.max(axis=1, keepdims=True)
        logp = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
        expected = -logp[np.arange(4), tgt].mean()
        assert got == pytest.approx(expected, abs=1e-6)

    def test_uniform_logits_hand_value(self):
        logits = tz.tensor(np.zeros((1, 4)))
        got = ls.label_smoothed_ce(logits, [2], smoothing=0.1, pad=-1).item()
        on, off = 0.9, 0.1 / 3
        expected = on * math.log(on / 0.25) + 3 * off * math.log(off / 0.25)
        assert got == pytest.approx(expected, abs=1e-6)

    def test_pad_positions_excluded(self):
        r = np.random.default_rng(6)
        raw = r.normal(size=(3, 5))
        with_pad = ls.label_smoothed_ce(tz.tensor(raw), [2, 0, 3], 0.1).item()
        no_pad = ls.label_smoothed_ce(
            tz.tensor(raw[[0, 2]]), [2, 3], 0.1
        ).item()
        assert with_pad == pytest.approx(no_pad, abs=1e-6)

    def test_out_of_range_target(self):
        with pytest.raises(ValueError):
            ls.label_smoothed_ce(tz.tensor(np.zeros((1, 4))), [4], 0.1)

    def test_grad(self):
        r = np.random.default_rng(7)
        logits = tz.param(r.normal(size=(4, 5)))
        check_grads(
            lambda: ls.label_smoothed_ce(logits, [2, 1, 0, 4], 0.1), [logits], tol=1e-3
        )


class TestJointLoss:
    def _pair(self, c, a):
        return tz.tensor(c), tz.tensor(a)

    def test_extremes(self):
        c, a = self._pair(2.0, 1.0)
        assert ls.joint_loss(c, a, 0.0).item() == pytest.approx(1.0)
        assert ls.joint_loss(c, a, 1.0).item() == pytest.approx(2.0)

    def test_reference_weight(self):
        c, a = self._pair(2.0, 1.0)
        assert ls.joint_loss(c, a, 0.3).item() == pytest.approx(1.3)

    def test_linear_in_weight(self):
        c, a = self._pair(3.0, -1.0)
        y0 = ls.joint_loss(c, a, 0.0).item()
        y1 = ls.joint_loss(c, a, 1.0).item()
        for lam in (0.25, 0.3, 0.8):
            expected = y0 + lam * (y1 - y0)
            assert ls.joint_loss(c, a, lam).item() == pytest.approx(expected, abs=1e-6)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ls.JointLossSpec(ctc_weight=1.5)
        with pytest.raises(ValueError):
            ls.JointLossSpec(label_smoothing=1.0)

    def test_non_finite_rejected(self):
        c = tz.Tensor(np.array(np.inf))
        with pytest.raises(ValueError):
            ls.joint_loss(c, tz.tensor(1.0), 0.3)
