import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mtlf import autograd as ag
from mtlf.autograd import Tensor
from mtlf.errors import ContractError, DimensionError, LabelError, NumericError, ParameterError


def manual_matmul(a, b):
    # independent dot-product oracle
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            out[i][j] = sum(a[i][t] * b[t][j] for t in range(k))
    return np.array(out)


class TestMatmul:
    def test_identity(self):
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        out = ag.matmul(Tensor(np.eye(2, dtype=np.float32)), b)
        np.testing.assert_array_equal(out.data, b.data)

    def test_zero(self):
        z = Tensor(np.zeros((2, 2), dtype=np.float32))
        out = ag.matmul(z, Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_against_manual_oracle(self):
        a = [[1.0, 2.0], [3.0, 4.0]]
        b = [[5.0, 6.0], [7.0, 8.0]]
        expected = manual_matmul(a, b)
        assert expected.tolist() == [[19.0, 22.0], [43.0, 50.0]]
        out = ag.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, expected, rtol=1e-6)

    def test_random_against_oracle(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 5))
        out = ag.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, manual_matmul(a.tolist(), b.tolist()), rtol=1e-10)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError) as exc:
            ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        assert "(2, 3)" in str(exc.value)

    def test_batched(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(2, 3, 4, 5))
        b = rng.normal(size=(2, 3, 5, 6))
        out = ag.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, a @ b, rtol=1e-6)


class TestGelu:
    def test_zero(self):
        assert ag.gelu(Tensor([0.0])).item() == 0.0

    def test_positive_asymptote(self):
        assert abs(ag.gelu(Tensor([10.0], dtype=np.float64)).item() - 10.0) < 1e-6

    def test_negative_asymptote(self):
        assert abs(ag.gelu(Tensor([-10.0], dtype=np.float64)).item()) < 1e-6


class TestSoftmax:
    def test_symmetry(self):
        out = ag.softmax(Tensor([0.0, 0.0]), axis=-1)
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_shift_invariance(self):
        x = np.array([0.3, -1.2, 2.5])
        a = ag.softmax(Tensor(x), axis=-1).data
        b = ag.softmax(Tensor(x + 7.0), axis=-1).data
        np.testing.assert_allclose(a, b, atol=1e-7)

    def test_log_inputs(self):
        x = Tensor([math.log(1), math.log(2), math.log(3)], dtype=np.float64)
        out = ag.softmax(x, axis=-1)
        np.testing.assert_allclose(out.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)

    def test_stability_large_magnitude(self):
        x = Tensor(np.array([1e4, -1e4, 5e3], dtype=np.float32))
        out = ag.softmax(x, axis=-1)
        assert abs(float(out.data.sum()) - 1.0) < 1e-6
        assert np.all(out.data >= 0)

    def test_bad_axis(self):
        with pytest.raises(ParameterError):
            ag.softmax(Tensor([1.0, 2.0]), axis=3)

    @given(
        hnp.arrays(
            np.float64,
            hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=6),
            elements=st.floats(-1e4, 1e4),
        )
    )
    @settings(max_examples=60, deadline=None)
    def test_rows_sum_to_one(self, arr):
        out = ag.softmax(Tensor(arr), axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)


class TestLayerNorm:
    def test_constant_row_degenerate_variance(self):
        x = Tensor([[3.0, 3.0, 3.0]])
        out = ag.layer_norm(x, Tensor.ones(3), Tensor.zeros(3), eps=1e-5)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_zero_gamma_gives_beta(self):
        x = Tensor([[1.0, -2.0, 0.5]])
        beta = Tensor([4.0, 5.0, 6.0])
        out = ag.layer_norm(x, Tensor.zeros(3), beta, eps=1e-5)
        np.testing.assert_allclose(out.data, [[4.0, 5.0, 6.0]], atol=1e-7)

    def test_symmetric_normalization(self):
        x = Tensor([1.0, 2.0, 3.0], dtype=np.float64)
        out = ag.layer_norm(x, Tensor.ones(3, dtype=np.float64), Tensor.zeros(3, dtype=np.float64), eps=1e-12)
        np.testing.assert_allclose(out.data, [-1.2247, 0.0, 1.2247], atol=1e-4)

    def test_shape_validation(self):
        with pytest.raises(DimensionError):
            ag.layer_norm(Tensor([[1.0, 2.0]]), Tensor.ones(3), Tensor.zeros(2))


class TestDropout:
    def test_p_zero_identity(self):
        x = Tensor([1.0, 2.0, 3.0])
        out = ag.dropout(x, 0.0, training=True, rng=np.random.default_rng(0))
        np.testing.assert_array_equal(out.data, x.data)

    def test_eval_identity(self):
        x = Tensor([1.0, 2.0, 3.0])
        out = ag.dropout(x, 0.9, training=False)
        np.testing.assert_array_equal(out.data, x.data)

    def test_invalid_p(self):
        for p in (-0.1, 1.0, 1.5):
            with pytest.raises(ParameterError):
                ag.dropout(Tensor([1.0]), p, training=True, rng=np.random.default_rng(0))

    def test_monte_carlo_expectation(self):
        # oracle: inverted dropout is unbiased, so the mean over many seeded
        # draws of dropout(ones, 0.5) must come back to ~1 per element
        draws, width = 100_000, 8
        x = Tensor(np.ones((draws, width), dtype=np.float32))
        out = ag.dropout(x, 0.5, training=True, rng=np.random.default_rng(42))
        per_element_mean = out.data.mean(axis=0)
        np.testing.assert_allclose(per_element_mean, 1.0, atol=0.02)


class TestCrossEntropy:
    def test_uniform_two_class(self):
        loss = ag.cross_entropy_loss(Tensor([[0.0, 0.0]]), [0])
        assert abs(loss.item() - math.log(2)) < 1e-6

    def test_confident_correct_limit(self):
        loss = ag.cross_entropy_loss(Tensor([[40.0, 0.0]]), [0])
        assert loss.item() < 1e-6

    def test_mean_invariance_under_duplication(self):
        logits = np.array([[0.2, -1.0], [1.5, 0.3], [-0.7, 0.9]], dtype=np.float32)
        labels = [0, 1, 1]
        single = ag.cross_entropy_loss(Tensor(logits), labels).item()
        doubled = ag.cross_entropy_loss(
            Tensor(np.concatenate([logits, logits])), labels + labels
        ).item()
        assert abs(single - doubled) < 1e-6

    def test_label_out_of_range_names_row(self):
        with pytest.raises(LabelError) as exc:
            ag.cross_entropy_loss(Tensor([[0.0, 0.0], [0.0, 0.0]]), [0, 5])
        assert "row 1" in str(exc.value)

    @given(
        hnp.arrays(np.float64, (4, 3), elements=st.floats(-50, 50)),
        st.lists(st.integers(0, 2), min_size=4, max_size=4),
    )
    @settings(max_examples=50, deadline=None)
    def test_nonnegative(self, logits, labels):
        assert ag.cross_entropy_loss(Tensor(logits), labels).item() >= 0.0


class TestMse:
    def test_equal_is_zero(self):
        assert ag.mse_loss(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0

    def test_unit_gap(self):
        assert ag.mse_loss(Tensor([0.0]), Tensor([1.0])).item() == 1.0

    def test_swapped_pair(self):
        assert ag.mse_loss(Tensor([0.0, 1.0]), Tensor([1.0, 0.0])).item() == 1.0

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            ag.mse_loss(Tensor([0.0, 1.0]), Tensor([1.0]))

    @given(
        hnp.arrays(np.float64, (5,), elements=st.floats(-100, 100)),
        hnp.arrays(np.float64, (5,), elements=st.floats(-100, 100)),
    )
    @settings(max_examples=50, deadline=None)
    def test_nonnegative(self, a, b):
        assert ag.mse_loss(Tensor(a), Tensor(b)).item() >= 0.0


class TestBackward:
    def test_square_analytic(self):
        x = Tensor([3.0], requires_grad=True)
        loss = ag.total(ag.mul(x, x))
        loss.backward()
        np.testing.assert_allclose(x.grad, [6.0])

    def test_constant_wrt_parameter(self):
        x = Tensor([3.0], requires_grad=True)
        loss = ag.total(ag.mul(x, 0.0))
        loss.backward()
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_softmax_ce_uniform_gradient(self):
        logits = Tensor([[0.0, 0.0]], requires_grad=True)
        ag.cross_entropy_loss(logits, [0]).backward()
        np.testing.assert_allclose(logits.grad, [[-0.5, 0.5]], atol=1e-7)

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            ag.mul(x, x).backward()

    def test_double_backward_doubles_exactly(self):
        w = Tensor(np.array([[0.3, -0.2], [1.1, 0.4]], dtype=np.float32), requires_grad=True)
        x = Tensor(np.array([[1.0, 2.0]], dtype=np.float32))

        def loss():
            return ag.cross_entropy_loss(ag.matmul(x, w), [1])

        loss().backward()
        once = w.grad.copy()
        loss().backward()
        np.testing.assert_array_equal(w.grad, 2.0 * once)

    def test_gradient_accumulates_through_shared_node(self):
        x = Tensor([2.0], requires_grad=True)
        y = ag.mul(x, x)
        loss = ag.total(ag.add(y, y))
        loss.backward()
        np.testing.assert_allclose(x.grad, [8.0])


class TestTensorInvariants:
    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            Tensor([np.nan])

    def test_inf_rejected_at_op_boundary(self):
        big = Tensor(np.array([3e38], dtype=np.float32))
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            ag.mul(big, big)

    def test_grad_shape_matches(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        ag.total(ag.mul(x, x)).backward()
        assert x.grad.shape == x.data.shape

    def test_determinism(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(4, 4)).astype(np.float32)
        r1 = ag.gelu(ag.matmul(Tensor(a), Tensor(a))).data
        r2 = ag.gelu(ag.matmul(Tensor(a), Tensor(a))).data
        np.testing.assert_array_equal(r1, r2)

    def test_float64_mode_preserved(self):
        x = Tensor(np.ones(3, dtype=np.float64))
        assert ag.gelu(x).dtype == np.float64
        assert ag.softmax(x, axis=-1).dtype == np.float64


class TestEmbeddingAndIndexing:
    def test_gather_and_scatter(self):
        table = Tensor(np.arange(12, dtype=np.float32).reshape(4, 3), requires_grad=True)
        ids = np.array([[0, 2], [2, 1]])
        out = ag.embedding(table, ids)
        np.testing.assert_array_equal(out.data[0, 1], table.data[2])
        ag.total(out).backward()
        # row 2 gathered twice -> gradient 2, row 3 never -> 0
        np.testing.assert_array_equal(table.grad[2], [2.0, 2.0, 2.0])
        np.testing.assert_array_equal(table.grad[3], [0.0, 0.0, 0.0])

    def test_take_slice_gradient(self):
        x = Tensor(np.ones((2, 3, 4)), requires_grad=True)
        pooled = ag.take(x, (slice(None), 0))
        assert pooled.shape == (2, 4)
        ag.total(pooled).backward()
        assert x.grad[:, 0].sum() == 8.0
        assert x.grad[:, 1:].sum() == 0.0
