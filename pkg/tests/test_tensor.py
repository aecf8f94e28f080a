import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audiomlm import tensor as T
from audiomlm.errors import ContractError, ShapeError
from audiomlm.tensor import Tensor

from oracles import FD_RTOL, numeric_gradient, rel_error, scalar_cross_entropy


def check_grads(build_loss, arrays, n_instances=20, seed=0):
    """FD-verify the gradient of build_loss(*tensors) for random instances.

    ``arrays`` is a list of shape tuples; float64 throughout.
    """
    rng = np.random.default_rng(seed)
    for _ in range(n_instances):
        values = [rng.standard_normal(shape) for shape in arrays]
        leaves = [Tensor(v.copy(), requires_grad=True) for v in values]
        loss = build_loss(*leaves)
        T.backward(loss)

        def f(vals=values):
            consts = [Tensor(v) for v in vals]
            return float(build_loss(*consts).data)

        numeric = numeric_gradient(f, values)
        for leaf, num in zip(leaves, numeric):
            assert rel_error(leaf.grad, num) < FD_RTOL


class TestMatmul:
    def test_identity(self):
        eye = np.eye(2)
        out = T.matmul(Tensor(eye), Tensor(eye))
        np.testing.assert_array_equal(out.data, eye)

    def test_hand_case(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        b = Tensor(np.array([[1.0], [1.0]]))
        np.testing.assert_allclose(T.matmul(a, b).data, [[3.0], [7.0]])

    def test_matmul_identity_invariant(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((6, 6)).astype(np.float32)
        out = T.matmul(Tensor(a), Tensor(np.eye(6, dtype=np.float32)))
        np.testing.assert_allclose(out.data, a, atol=1e-6)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradient_vs_finite_differences(self):
        check_grads(lambda a, b: T.tsum(T.matmul(a, b) ** 2.0), [(5, 4), (4, 3)])

    def test_batched_gradient(self):
        check_grads(
            lambda a, b: T.tsum(T.matmul(a, b) ** 2.0), [(2, 3, 4), (4, 5)], n_instances=5
        )


class TestSoftmaxCrossEntropy:
    def test_confident_prediction_loss_vanishes(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 50.0
        loss = T.softmax_cross_entropy(Tensor(logits), [2], reduction="sum")
        assert loss.item() < 1e-8

    def test_uniform_logits_closed_form(self):
        loss = T.softmax_cross_entropy(Tensor(np.zeros((5, 32))), [0] * 5, reduction="mean")
        assert abs(loss.item() - np.log(32)) < 1e-6

    def test_matches_scalar_recomputation(self):
        rng = np.random.default_rng(5)
        logits = rng.standard_normal((6, 8))
        targets = rng.integers(8, size=6)
        loss = T.softmax_cross_entropy(Tensor(logits), targets, reduction="sum")
        assert abs(loss.item() - scalar_cross_entropy(logits, targets)) < 1e-6

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            T.softmax_cross_entropy(Tensor(np.zeros((2, 4))), [0, 4])

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(1)
        targets = rng.integers(7, size=5)
        check_grads(
            lambda x: T.softmax_cross_entropy(x, targets, reduction="mean"), [(5, 7)]
        )


class TestElementwiseOps:
    def test_layer_norm_constant_vector_is_zero_before_affine(self):
        x = Tensor(np.full((3, 8), 2.5))
        out = T.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_layer_norm_gradients(self):
        check_grads(
            lambda x, g, b: T.tsum(T.layer_norm(x, g, b) ** 2.0), [(4, 6), (6,), (6,)]
        )

    def test_gelu_gradient(self):
        check_grads(lambda x: T.tsum(T.gelu(x) ** 2.0), [(5, 3)])

    def test_softmax_gradient(self):
        check_grads(lambda x: T.tsum(T.softmax(x, axis=-1) ** 2.0), [(4, 6)])

    def test_l2_normalize_gradient(self):
        check_grads(lambda x: T.tsum(T.l2_normalize(x) ** 3.0), [(4, 5)])

    def test_sigmoid_bce_gradient(self):
        rng = np.random.default_rng(2)
        y = rng.integers(2, size=(4, 3)).astype(np.float64)
        check_grads(lambda x: T.sigmoid_bce_with_logits(x, y, reduction="mean"), [(4, 3)])

    def test_div_and_sqrt_gradients(self):
        check_grads(
            lambda a, b: T.tsum(a / (T.tsqrt(b**2.0) + 1.0)), [(3, 4), (3, 4)], n_instances=8
        )

    def test_broadcast_add_mul_gradients(self):
        check_grads(
            lambda x, b: T.tsum((x + b) * b), [(4, 3, 5), (5,)], n_instances=8
        )

    @given(st.integers(1, 6), st.integers(2, 9), st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_softmax_rows_sum_to_one(self, rows, cols, seed):
        x = np.random.default_rng(seed).standard_normal((rows, cols)) * 10
        s = T.softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)


class TestEmbeddingAndSelect:
    def test_embedding_rows(self):
        table = Tensor(np.arange(12.0).reshape(4, 3))
        out = T.embedding(table, np.array([2, 0, 2]))
        np.testing.assert_array_equal(out.data, table.data[[2, 0, 2]])

    def test_embedding_gradient_scatter_adds(self):
        table = Tensor(np.zeros((4, 3)), requires_grad=True)
        out = T.embedding(table, np.array([1, 1, 3]))
        T.backward(T.tsum(out))
        expected = np.zeros((4, 3))
        expected[1] = 2.0
        expected[3] = 1.0
        np.testing.assert_array_equal(table.grad, expected)

    def test_embedding_fd(self):
        ids = np.array([0, 2, 2, 1])
        check_grads(lambda t: T.tsum(T.embedding(t, ids) ** 2.0), [(4, 3)], n_instances=5)

    def test_index_select_fd(self):
        idx = np.array([3, 0, 3])
        check_grads(lambda x: T.tsum(T.index_select(x, idx) ** 2.0), [(5, 2)], n_instances=5)

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            T.embedding(Tensor(np.zeros((4, 3))), np.array([4]))


class TestStraightThrough:
    def test_forward_equals_replacement_values(self):
        e = Tensor(np.zeros((2, 3)), requires_grad=True)
        q = np.arange(6.0).reshape(2, 3)
        out = T.straight_through(e, q)
        np.testing.assert_array_equal(out.data, q)

    def test_identity_gradient_copy(self):
        e = Tensor(np.random.default_rng(0).standard_normal((2, 3)), requires_grad=True)
        out = T.straight_through(e, np.ones((2, 3)))
        T.backward(T.tsum(out))
        np.testing.assert_array_equal(e.grad, np.ones((2, 3)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.straight_through(Tensor(np.zeros((2, 3))), np.zeros((3, 2)))


class TestBackwardSemantics:
    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ContractError):
            T.backward(x + 1.0)

    def test_multi_use_gradients_sum(self):
        x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
        loss = T.tsum(x * x + x)  # d/dx = 2x + 1
        T.backward(loss)
        np.testing.assert_allclose(x.grad, [5.0, 7.0])

    def test_unreachable_parameter_keeps_zero_grad(self):
        used = T.parameter(np.ones(3), "used")
        unused = T.parameter(np.ones(3), "unused")
        T.backward(T.tsum(used * 2.0))
        np.testing.assert_array_equal(unused.grad, np.zeros(3))
        np.testing.assert_array_equal(used.grad, np.full(3, 2.0))

    def test_backward_accumulates_across_calls(self):
        x = Tensor(np.ones(2), requires_grad=True)
        T.backward(T.tsum(x))
        T.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, np.full(2, 2.0))

    def test_backward_deterministic_bit_identical(self):
        def run():
            rng = np.random.default_rng(42)
            a = Tensor(rng.standard_normal((6, 6)).astype(np.float32), requires_grad=True)
            b = Tensor(rng.standard_normal((6, 6)).astype(np.float32), requires_grad=True)
            loss = T.tsum(T.gelu(T.matmul(a, b)) ** 2.0)
            T.backward(loss)
            return a.grad.copy(), b.grad.copy()

        g1, g2 = run(), run()
        assert np.array_equal(g1[0], g2[0]) and np.array_equal(g1[1], g2[1])

    def test_no_grad_blocks_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            out = T.tsum(x * 2.0)
        assert not out.requires_grad

    def test_detach_blocks_gradient(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = T.tsum(x.detach() * x)
        T.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones(3))


class TestDebugChecks:
    def test_debug_mode_flags_nonfinite_forward(self):
        T.set_debug_checks(True)
        try:
            with pytest.raises(ContractError, match="non-finite"):
                T.texp(Tensor(np.array([1000.0])))  # overflows to inf
        finally:
            T.set_debug_checks(False)

    def test_debug_mode_off_by_default(self):
        out = T.texp(Tensor(np.array([1000.0])))
        assert np.isinf(out.data[0])
