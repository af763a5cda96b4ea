import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from kdrank import tensor as T
from kdrank.errors import ContractError, DimensionError, EmptySequenceError
from kdrank.gradcheck import check_gradients
from kdrank.tensor import Tensor, parameter


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[2, 3], [4, 5]]))
        np.testing.assert_array_equal(out.data, [[2, 3], [4, 5]])

    def test_row_times_column(self):
        np.testing.assert_array_equal(T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data, [[11]])

    def test_against_triple_loop(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12, rtol=0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31 - 1))
    def test_random_shapes_match_oracle(self, m, k, n, seed):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=(m, k)), r.normal(size=(k, n))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12, rtol=0)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    @pytest.mark.parametrize("a_shape,b_shape", [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)), ((2, 3, 4), (2, 4, 5))])
    def test_gradients(self, rng, a_shape, b_shape):
        a, b = parameter(rng.normal(size=a_shape)), parameter(rng.normal(size=b_shape))
        w = rng.normal(size=np.broadcast_shapes(a_shape[:-1] + (1,), (1,)) [:-1] + (b_shape[-1],))
        assert check_gradients(lambda: T.sum_all(T.hadamard(T.matmul(a, b), Tensor(w))), [a, b]) < 1e-6


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_large_values_do_not_overflow(self):
        out = T.softmax_rows(Tensor([[1000.0, 1000.0]])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[0.5, 0.5]])

    def test_log_three(self):
        # exp(0) : exp(ln 3) = 1 : 3
        np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, math.log(3.0)]])).data, [[0.25, 0.75]], atol=1e-15)

    @settings(max_examples=60, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)),
                      elements=st.floats(-1e3, 1e3, allow_nan=False)))
    def test_rows_sum_to_one(self, x):
        y = T.softmax_rows(Tensor(x)).data
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)

    def test_mask_gives_exact_zero(self):
        y = T.softmax_rows(Tensor([[1.0, 2.0, 50.0]]), mask=np.array([[True, True, False]])).data
        assert y[0, 2] == 0.0
        np.testing.assert_allclose(y.sum(), 1.0)

    def test_gradient(self, rng):
        x = parameter(rng.normal(size=(3, 5)))
        w = Tensor(rng.normal(size=(3, 5)))
        assert check_gradients(lambda: T.sum_all(T.hadamard(T.softmax_rows(x), w)), [x]) < 1e-6


class TestElementwise:
    def test_hadamard(self):
        np.testing.assert_array_equal(T.elementwise("hadamard", Tensor([1, 2]), Tensor([3, 4])).data, [3, 8])

    def test_sub_self_is_zero(self, rng):
        a = Tensor(rng.normal(size=5))
        np.testing.assert_array_equal(T.elementwise("sub", a, a).data, np.zeros(5))

    def test_relu(self):
        np.testing.assert_array_equal(T.elementwise("relu", Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_relu_gradient_at_zero_is_zero(self):
        x = parameter([-1.0, 0.0, 2.0])
        T.backward(T.sum_all(T.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    @pytest.mark.parametrize("op", ["add", "sub", "hadamard"])
    def test_binary_gradients(self, rng, op):
        a, b = parameter(rng.normal(size=(2, 3))), parameter(rng.normal(size=(2, 3)))
        w = Tensor(rng.normal(size=(2, 3)))
        assert check_gradients(lambda: T.sum_all(T.hadamard(T.elementwise(op, a, b), w)), [a, b]) < 1e-6

    def test_unary_gradients(self, rng):
        x = parameter(rng.normal(size=(4, 3)))
        w = Tensor(rng.normal(size=(4, 3)))
        assert check_gradients(lambda: T.sum_all(T.hadamard(T.relu(x), w)), [x]) < 1e-6
        assert check_gradients(lambda: T.sum_all(T.hadamard(T.tanh(x), w)), [x]) < 1e-6


class TestConcat:
    def test_vectors(self):
        np.testing.assert_array_equal(T.concat([Tensor([1.0, 2.0]), Tensor([3.0])]).data, [1, 2, 3])

    def test_four_vectors(self, rng):
        d = 5
        parts = [Tensor(rng.normal(size=d)) for _ in range(4)]
        assert T.concat(parts).shape == (4 * d,)

    def test_gradient_routes_to_parts(self, rng):
        a, b = parameter(rng.normal(size=3)), parameter(rng.normal(size=2))
        T.backward(T.sum_all(T.concat([a, b])))
        np.testing.assert_array_equal(a.grad, np.ones(3))

    def test_incompatible(self):
        with pytest.raises(DimensionError):
            T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)

    def test_gradient_axis0(self, rng):
        a, b = parameter(rng.normal(size=(2, 3))), parameter(rng.normal(size=(1, 3)))
        w = Tensor(rng.normal(size=(3, 3)))
        assert check_gradients(lambda: T.sum_all(T.hadamard(T.concat([a, b], axis=0), w)), [a, b]) < 1e-6


class TestPool:
    X = [[1.0, 5.0], [3.0, 2.0]]

    def test_max(self):
        np.testing.assert_array_equal(T.pool(Tensor(self.X), "max", 2).data, [3, 5])

    def test_mean(self):
        np.testing.assert_array_equal(T.pool(Tensor(self.X), "mean", 2).data, [2, 3.5])

    @pytest.mark.parametrize("kind", ["max", "mean"])
    def test_single_valid_row(self, kind):
        np.testing.assert_array_equal(T.pool(Tensor(self.X), kind, 1).data, [1, 5])

    def test_empty_sequence(self):
        with pytest.raises(EmptySequenceError):
            T.pool(Tensor(self.X), "max", 0)

    @pytest.mark.parametrize("kind", ["max", "mean"])
    def test_padding_never_read(self, rng, kind):
        x = rng.normal(size=(5, 3))
        y = x.copy()
        y[3:] = [[1e300, np.nan, -np.inf]] * 2
        np.testing.assert_array_equal(T.pool(Tensor(x), kind, 3).data, T.pool(Tensor(y), kind, 3).data)

    def test_max_gradient_goes_to_first_argmax(self):
        x = parameter([[2.0, 1.0], [2.0, 3.0]])
        T.backward(T.sum_all(T.pool(x, "max", 2)))
        np.testing.assert_array_equal(x.grad, [[1.0, 0.0], [0.0, 1.0]])

    def test_mean_gradient_splits(self):
        x = parameter(np.zeros((4, 2)))
        T.backward(T.sum_all(T.pool(x, "mean", 2)))
        np.testing.assert_array_equal(x.grad, [[0.5, 0.5], [0.5, 0.5], [0, 0], [0, 0]])

    @pytest.mark.parametrize("kind", ["max", "mean"])
    def test_gradient(self, rng, kind):
        x = parameter(rng.normal(size=(2, 5, 3)))
        w = Tensor(rng.normal(size=(2, 3)))
        lengths = [5, 2]
        assert check_gradients(lambda: T.sum_all(T.hadamard(T.masked_pool(x, lengths, kind), w)), [x]) < 1e-6


class TestBackward:
    def test_square(self):
        x = parameter([1.0, 2.0])
        T.backward(T.sum_all(T.hadamard(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_unused_parameter_has_zero_grad(self):
        x, p = parameter([1.0, 2.0]), parameter([3.0])
        T.backward(T.sum_all(x))
        np.testing.assert_array_equal(p.grad, [0.0])

    def test_accumulates_across_calls(self):
        x = parameter([1.0, 2.0])
        loss = T.sum_all(T.hadamard(x, x))
        T.backward(loss)
        T.backward(loss)
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            T.backward(T.relu(parameter([1.0, 2.0])))

    def test_reverse_execution_order(self):
        x = parameter([1.5])
        y = T.scale(x, 2.0)
        z = T.hadamard(y, x)
        loss = T.sum_all(T.add(z, y))
        assert y._node.seq < z._node.seq < loss._node.seq
        T.backward(loss)
        # d/dx (2x*x + 2x) = 4x + 2
        np.testing.assert_allclose(x.grad, [8.0])

    def test_shared_subexpression_sums(self, rng):
        x = parameter(rng.normal(size=3))
        y = T.tanh(x)
        assert check_gradients(lambda: T.sum_all(T.hadamard(T.tanh(x), T.tanh(x))), [x]) < 1e-6
        del y

    def test_no_grad_records_nothing(self):
        x = parameter([1.0])
        with T.no_grad():
            y = T.scale(x, 3.0)
        assert y._node is None and not y.requires_grad

    def test_grad_buffer_presence(self):
        assert Tensor([1.0]).grad is None
        assert parameter([[1.0, 2.0]]).grad.shape == (1, 2)


class TestMiscOps:
    def test_layer_norm_gradient(self, rng):
        x = parameter(rng.normal(size=(2, 3, 4)))
        g, b = parameter(rng.normal(size=4)), parameter(rng.normal(size=4))
        w = Tensor(rng.normal(size=(2, 3, 4)))
        assert check_gradients(lambda: T.sum_all(T.hadamard(T.layer_norm(x, g, b), w)), [x, g, b]) < 1e-5

    def test_index_rows_repeated_gradient(self):
        table = parameter(np.arange(6.0).reshape(3, 2))
        T.backward(T.sum_all(T.index_rows(table, [0, 2, 0])))
        np.testing.assert_array_equal(table.grad, [[2, 2], [0, 0], [1, 1]])

    def test_reverse_valid_is_involution(self, rng):
        x = rng.normal(size=(2, 4, 3))
        lengths = [4, 2]
        once = T.reverse_valid(Tensor(x), lengths).data
        np.testing.assert_array_equal(once[1, :2], x[1, 1::-1])
        np.testing.assert_array_equal(once[1, 2:], x[1, 2:])
        np.testing.assert_array_equal(T.reverse_valid(Tensor(once), lengths).data, x)

    def test_cross_entropy_gradient(self, rng):
        s = parameter(rng.normal(size=(3, 4)))
        assert check_gradients(lambda: T.cross_entropy(s, [0, 3, 1]), [s]) < 1e-6

    def test_select_and_transpose_gradients(self, rng):
        x = parameter(rng.normal(size=(2, 3, 4)))
        w = Tensor(rng.normal(size=(2, 4, 3)))
        assert check_gradients(lambda: T.sum_all(T.hadamard(T.transpose(x), w)), [x]) < 1e-6
        v = Tensor(rng.normal(size=(2, 4)))
        assert check_gradients(lambda: T.sum_all(T.hadamard(T.select(x, 1, axis=1), v)), [x]) < 1e-6

    def test_outputs_finite(self, rng):
        x = Tensor(rng.normal(size=(3, 4)) * 50)
        for out in (T.softmax_rows(x), T.relu(x), T.tanh(x), T.pool(x, "max", 3)):
            assert np.all(np.isfinite(out.data))
