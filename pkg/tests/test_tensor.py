import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speechsum import tensor as tz
from util import check_grads, finite_diff, max_rel_err


def rng(seed=0):
    return np.random.default_rng(seed)


class TestMatmul:
    def test_identity(self):
        a = tz.tensor(np.eye(2))
        b = tz.tensor([[1, 2], [3, 4]])
        assert np.array_equal(tz.matmul(a, b).data, [[1, 2], [3, 4]])

    def test_inner_product(self):
        out = tz.matmul(tz.tensor([[1, 2]]), tz.tensor([[3], [4]]))
        assert np.array_equal(out.data, [[11]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(tz.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            tz.matmul(tz.tensor(np.zeros((2, 3))), tz.tensor(np.zeros((2, 3))))

    def test_grad_of_sum_closed_form(self):
        r = rng(3)
        a = tz.param(r.normal(size=(4, 5)))
        b = tz.param(r.normal(size=(5, 3)))
        with tz.GradTape() as tape:
            loss = tz.sum_all(tz.matmul(a, b))
        tz.backward(loss, tape)
        expected = np.ones((4, 3), dtype=np.float32) @ b.data.T
        np.testing.assert_allclose(a.grad, expected, rtol=1e-6)

    def test_grad_matches_finite_differences(self):
        r = rng(3)
        a = tz.param(r.normal(size=(4, 5)))
        b = tz.param(r.normal(size=(5, 3)))
        check_grads(lambda: tz.sum_all(tz.matmul(a, b)), [a, b], tol=1e-3)


class TestMaskedSoftmax:
    def test_symmetric_pair(self):
        out = tz.masked_softmax(tz.tensor([0.0, 0.0]), np.array([True, True]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_single_allowed_position(self):
        out = tz.masked_softmax(tz.tensor([5.0, 100.0]), np.array([True, False]))
        np.testing.assert_array_equal(out.data, [1.0, 0.0])

    def test_matches_f64_exponential_sum(self):
        out = tz.masked_softmax(tz.tensor([1.0, 2.0, 3.0]), np.ones(3, dtype=bool))
        es = [math.exp(x) for x in (1.0, 2.0, 3.0)]
        expected = np.array(es) / sum(es)
        np.testing.assert_allclose(out.data, expected, atol=1e-7)

    def test_fully_masked_row_raises(self):
        scores = tz.tensor(np.zeros((2, 3)))
        mask = np.array([[True, True, True], [False, False, False]])
        with pytest.raises(tz.MaskError):
            tz.masked_softmax(scores, mask)

    def test_grad(self):
        r = rng(7)
        x = tz.param(r.normal(size=(3, 5)))
        w = tz.tensor(r.normal(size=(3, 5)))
        mask = r.random((3, 5)) > 0.3
        mask[:, 0] = True
        check_grads(
            lambda: tz.sum_all(tz.mul(tz.masked_softmax(x, mask), w)), [x], tol=1e-3
        )

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_rows_normalize_and_masked_stay_zero(self, n, seed):
        r = np.random.default_rng(seed)
        scores = tz.tensor(r.normal(size=(4, n)) * 5)
        mask = r.random((4, n)) > 0.4
        mask[np.arange(4), r.integers(0, n, size=4)] = True
        out = tz.masked_softmax(scores, mask).data
        assert np.abs(out.sum(axis=-1) - 1.0).max() <= 1e-6
        assert np.all(out[~mask] == 0.0)


class TestLayerNorm:
    def _gb(self, d):
        return tz.param(np.ones(d)), tz.param(np.zeros(d))

    def test_constant_row(self):
        g, b = self._gb(3)
        out = tz.layer_norm(tz.tensor([[1.0, 1.0, 1.0]]), g, b)
        np.testing.assert_allclose(out.data, [[0, 0, 0]], atol=1e-3)

    def test_symmetric_pair(self):
        g, b = self._gb(2)
        out = tz.layer_norm(tz.tensor([[0.0, 2.0]]), g, b, eps=1e-12)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-6)

    def test_output_moments(self):
        r = rng(5)
        g, b = self._gb(64)
        out = tz.layer_norm(tz.tensor(r.normal(size=(1, 64)) * 3 + 1), g, b, eps=1e-12)
        row = out.data.astype(np.float64)
        assert abs(row.mean()) < 1e-5
        assert abs(row.var() - 1.0) < 1e-5

    def test_grad(self):
        r = rng(11)
        x = tz.param(r.normal(size=(4, 8)))
        g = tz.param(1 + 0.1 * r.normal(size=8))
        b = tz.param(0.1 * r.normal(size=8))
        w = tz.tensor(r.normal(size=(4, 8)))
        check_grads(
            lambda: tz.sum_all(tz.mul(tz.layer_norm(x, g, b), w)), [x, g, b], tol=1e-3
        )


class TestConvSubsample:
    def _weights(self, c, r):
        return tz.param(r.normal(size=(3, 3, c)) * 0.2), tz.param(np.zeros(c))

    @pytest.mark.parametrize("t,expected", [(10, 5), (11, 6), (9806, 4903)])
    def test_halved_length(self, t, expected):
        r = rng(1)
        w, b = self._weights(2, r)
        x = tz.tensor(r.normal(size=(t, 4)))
        assert tz.conv_subsample(x, w, b).data.shape == (expected, 4 * 2)

    def test_too_short(self):
        r = rng(1)
        w, b = self._weights(2, r)
        with pytest.raises(tz.ShapeError):
            tz.conv_subsample(tz.tensor(np.zeros((1, 4))), w, b)

    def test_grad(self):
        r = rng(13)
        w, b = self._weights(2, r)
        x = tz.param(r.normal(size=(5, 3)))
        wt = tz.tensor(r.normal(size=(3, 6)))
        check_grads(
            lambda: tz.sum_all(tz.mul(tz.conv_subsample(x, w, b), wt)),
            [x, w, b],
            tol=1e-3,
        )


class TestDepthwiseConv:
    def test_grad(self):
        r = rng(17)
        x = tz.param(r.normal(size=(6, 4)))
        w = tz.param(r.normal(size=(3, 4)) * 0.5)
        b = tz.param(np.zeros(4))
        wt = tz.tensor(r.normal(size=(6, 4)))
        check_grads(
            lambda: tz.sum_all(tz.mul(tz.depthwise_conv1d(x, w, b), wt)),
            [x, w, b],
            tol=1e-3,
        )

    def test_identity_kernel(self):
        x = tz.tensor(rng(2).normal(size=(5, 3)))
        w = tz.tensor(np.stack([np.zeros(3), np.ones(3), np.zeros(3)]))
        b = tz.tensor(np.zeros(3))
        np.testing.assert_array_equal(tz.depthwise_conv1d(x, w, b).data, x.data)


class TestBackward:
    def test_sum_gives_ones(self):
        p = tz.param(rng(0).normal(size=(3, 4)))
        with tz.GradTape() as tape:
            loss = tz.sum_all(p)
        tz.backward(loss, tape)
        np.testing.assert_array_equal(p.grad, np.ones((3, 4), dtype=np.float32))

    def test_sum_of_squares_gives_2p(self):
        p = tz.param(rng(0).normal(size=(5,)))
        with tz.GradTape() as tape:
            loss = tz.sum_all(tz.mul(p, p))
        tz.backward(loss, tape)
        np.testing.assert_allclose(p.grad, 2 * p.data, rtol=1e-6)

    def test_non_scalar_loss_rejected(self):
        p = tz.param(np.ones(3))
        with tz.GradTape() as tape:
            out = tz.mul(p, p)
        with pytest.raises(tz.TapeError):
            tz.backward(out, tape)

    def test_reused_tape_rejected(self):
        p = tz.param(np.ones(3))
        with tz.GradTape() as tape:
            loss = tz.sum_all(p)
        tz.backward(loss, tape)
        with pytest.raises(tz.TapeError):
            tz.backward(loss, tape)

    def test_reset_allows_reuse(self):
        p = tz.param(np.ones(3))
        with tz.GradTape() as tape:
            loss = tz.sum_all(p)
        tz.backward(loss, tape)
        tape.reset()
        with tape:
            loss = tz.sum_all(tz.mul(p, p))
        tz.backward(loss, tape)
        np.testing.assert_allclose(p.grad, 2 * p.data)


class TestMiscOps:
    def test_gelu_grad(self):
        x = tz.param(rng(19).normal(size=(4, 4)))
        check_grads(lambda: tz.sum_all(tz.gelu(x)), [x], tol=1e-3)

    def test_linear_grad(self):
        r = rng(23)
        x = tz.param(r.normal(size=(3, 4)))
        w = tz.param(r.normal(size=(4, 5)))
        b = tz.param(r.normal(size=(5,)))
        check_grads(lambda: tz.sum_all(tz.linear(x, w, b)), [x, w, b], tol=1e-3)

    def test_log_softmax_rows_normalize(self):
        x = tz.tensor(rng(29).normal(size=(6, 9)) * 4)
        out = tz.log_softmax(x)
        np.testing.assert_allclose(
            np.exp(out.data.astype(np.float64)).sum(axis=-1), 1.0, atol=1e-6
        )

    def test_log_softmax_grad(self):
        r = rng(31)
        x = tz.param(r.normal(size=(3, 6)))
        w = tz.tensor(r.normal(size=(3, 6)))
        check_grads(lambda: tz.sum_all(tz.mul(tz.log_softmax(x), w)), [x], tol=1e-3)

    def test_embedding_grad_scatter(self):
        table = tz.param(rng(37).normal(size=(7, 4)))
        ids = np.array([1, 3, 1])
        with tz.GradTape() as tape:
            loss = tz.sum_all(tz.embedding(table, ids))
        tz.backward(loss, tape)
        expected = np.zeros((7, 4), dtype=np.float32)
        np.add.at(expected, ids, 1.0)
        np.testing.assert_array_equal(table.grad, expected)

    def test_dropout_eval_is_identity(self):
        x = tz.tensor(rng(0).normal(size=(5, 5)))
        assert tz.dropout(x, 0.3, None) is x
        assert tz.dropout(x, 0.0, np.random.default_rng(0)) is x

    def test_dropout_deterministic_per_seed(self):
        x = tz.tensor(rng(0).normal(size=(50, 8)))
        a = tz.dropout(x, 0.4, np.random.default_rng(42)).data
        b = tz.dropout(x, 0.4, np.random.default_rng(42)).data
        np.testing.assert_array_equal(a, b)

    def test_tensor_rejects_non_finite(self):
        with pytest.raises(ValueError):
            tz.tensor([np.inf, 1.0])

    def test_ops_are_pure(self):
        r = rng(41)
        a = tz.tensor(r.normal(size=(8, 8)))
        b = tz.tensor(r.normal(size=(8, 8)))
        first = tz.matmul(a, b).data.copy()
        second = tz.matmul(a, b).data
        np.testing.assert_array_equal(first, second)

    def test_mean_all(self):
        x = tz.tensor([[1.0, 2.0], [3.0, 4.0]])
        assert tz.mean_all(x).item() == pytest.approx(2.5)
