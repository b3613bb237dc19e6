import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles as O
from capfuse import tensor as T
from capfuse.gradcheck import TOLERANCE, suite
from capfuse.tensor import Tensor

finite = st.floats(-5, 5, allow_nan=False, width=32)


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float32), requires_grad=True)


class TestOps:
    def test_matmul_identity(self):
        X = np.arange(12, dtype=np.float32).reshape(3, 4)
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(X)).data, X)

    def test_softmax_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-7)

    def test_tanh_backward_at_zero(self):
        x = leaf([0.0])
        T.backward(T.tsum(T.tanh(x)))
        assert x.grad[0] == pytest.approx(1.0)

    def test_add_column_broadcast(self):
        a = leaf(np.ones((2, 3)))
        b = leaf([[1.0], [2.0]])
        y = a + b
        np.testing.assert_array_equal(y.data, [[2, 2, 2], [3, 3, 3]])
        T.backward(T.tsum(y))
        np.testing.assert_array_equal(b.grad, [[3.0], [3.0]])

    @pytest.mark.parametrize("op", [T.add, T.sub, T.mul, T.matmul])
    def test_shape_mismatch_names_op_and_shapes(self, op):
        with pytest.raises(T.ShapeError) as e:
            op(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
        assert op.__name__ in str(e.value)
        assert "(2, 3)" in str(e.value) and "(4, 5)" in str(e.value)

    def test_slice_and_embedding_forward(self):
        table = Tensor(np.arange(8, dtype=np.float32).reshape(4, 2))
        np.testing.assert_array_equal(T.embedding(table, [3, 0]).data, [[6, 7], [0, 1]])
        np.testing.assert_array_equal(table[1:3].data, [[2, 3], [4, 5]])

    def test_embedding_repeated_ids_accumulate(self):
        table = leaf(np.zeros((3, 2)))
        T.backward(T.tsum(T.embedding(table, [1, 1, 2])))
        np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [1, 1]])

    def test_elu_relu_sigmoid_values(self):
        x = Tensor([-1.0, 0.0, 2.0])
        np.testing.assert_allclose(T.elu(x).data, [np.exp(-1) - 1, 0, 2], rtol=1e-6)
        np.testing.assert_array_equal(T.relu(x).data, [0, 0, 2])
        np.testing.assert_allclose(T.sigmoid(x).data, O.sigmoid(np.array([-1.0, 0.0, 2.0])), rtol=1e-6)


class TestBackward:
    def test_sum_of_squares(self):
        w = leaf([1.0, 2.0])
        T.backward(T.tsum(w * w))
        np.testing.assert_array_equal(w.grad, [2.0, 4.0])

    def test_unused_leaf_gets_no_gradient(self):
        w = leaf([1.0, 2.0])
        c = leaf([3.0])
        T.backward(T.tsum(c * 2.0))
        assert w.grad is None or not np.any(w.grad)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(T.ShapeError):
            T.backward(leaf([1.0, 2.0]) * 2.0)

    def test_twice_accumulates_exactly_double(self):
        rng = np.random.default_rng(0)
        x = leaf(rng.standard_normal((3, 4)))
        w = leaf(rng.standard_normal((4, 2)))
        loss = T.tsum(T.log_softmax(T.tanh(x @ w), axis=-1))
        T.backward(loss)
        g1 = w.grad.copy()
        T.backward(loss)
        np.testing.assert_array_equal(w.grad, 2 * g1)

    def test_leaves_have_no_tape_id_and_tape_is_topological(self):
        a = leaf([1.0])
        b = T.tanh(a)
        c = T.exp(b)
        assert a.tape_id is None and a.is_leaf
        assert b.tape_id < c.tape_id

    def test_no_grad_records_nothing(self):
        a = leaf([1.0])
        with T.no_grad():
            b = T.tanh(a)
        assert b.tape_id is None

    def test_random_graph_against_grad_check(self):
        def build(rng):
            x = leaf(rng.standard_normal((3, 4)))
            w = leaf(rng.standard_normal((4, 4)) * 0.5)
            return (lambda: T.mean(T.sigmoid(T.concat([T.tanh(x @ w), x], -1)) * 1.5)), [x, w]
        assert T.grad_check(build, 0) < TOLERANCE


class TestGradCheck:
    @pytest.mark.parametrize("name,seed", [("linear_softmax_nll", 1), ("feature_attention", 2),
                                           ("topdown_step", 3)])
    def test_named_examples(self, name, seed):
        assert T.grad_check(suite()[name], seed) < TOLERANCE

    def test_detects_wrong_gradient(self):
        # a deliberately broken op: forward x^2, backward claims 3x
        def bad(a):
            return T._make(a.data ** 2, "bad", (a,), lambda g: (g * 3 * a.data,))

        def build(rng):
            x = leaf(rng.standard_normal(4))
            return (lambda: T.tsum(bad(x))), [x]
        assert T.grad_check(build, 0) > 0.1

    def test_non_finite_rejected(self):
        def build(rng):
            x = leaf([-1.0])
            return (lambda: T.tsum(T.log(x))), [x]
        with pytest.raises(T.NumericalError), np.errstate(invalid="ignore"):
            T.grad_check(build, 0)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"w": leaf([1.0, -2.0])}
        st_ = T.AdamState(lr=0.1)
        T.adam_step(p, {"w": np.zeros(2, np.float32)}, st_)
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
        assert st_.t == 1

    def test_first_step_closed_form(self):
        g, lr = 0.3, 1e-2
        p = {"w": leaf([0.5])}
        T.adam_step(p, {"w": np.array([g], np.float32)}, T.AdamState(lr=lr))
        assert p["w"].data[0] == pytest.approx(0.5 - lr * g / (abs(g) + 1e-8), abs=1e-7)

    def test_two_steps_match_oracle(self):
        rng = np.random.default_rng(4)
        w0 = rng.standard_normal(5).astype(np.float32)
        g = rng.standard_normal(5).astype(np.float32)
        p = {"w": leaf(w0)}
        st_ = T.AdamState(lr=5e-4)
        grads_in = g.copy()
        T.adam_step(p, {"w": grads_in}, st_)
        T.adam_step(p, {"w": grads_in}, st_)
        np.testing.assert_array_equal(grads_in, g)  # gradients untouched
        expect = O.adam(w0, [g.astype(np.float64)] * 2, 5e-4)[-1]
        np.testing.assert_allclose(p["w"].data, expect, atol=1e-6)

    def test_non_finite_gradient_names_parameter(self):
        p = {"decoder.W_o": leaf([1.0])}
        with pytest.raises(T.NumericalError, match="decoder.W_o"):
            T.adam_step(p, {"decoder.W_o": np.array([np.nan], np.float32)}, T.AdamState())

    def test_clip_grad_norm(self):
        grads = {"a": np.array([3.0, 0.0], np.float32), "b": np.array([4.0], np.float32)}
        assert T.clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
        norm = np.sqrt(sum((g.astype(np.float64) ** 2).sum() for g in grads.values()))
        assert norm == pytest.approx(1.0, rel=1e-6)


class TestInit:
    def test_xavier_bounds_and_determinism(self):
        a = T.xavier_uniform(np.random.default_rng(0), 30, 20).data
        b = T.xavier_uniform(np.random.default_rng(0), 30, 20).data
        np.testing.assert_array_equal(a, b)
        assert np.abs(a).max() <= np.sqrt(6 / 50)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=3, max_side=6), elements=finite),
       st.integers(0, 2))
def test_softmax_is_distribution(x, axis):
    axis = axis % x.ndim
    y = T.softmax(Tensor(x), axis=axis).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=axis), 1.0, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, (3, 4), elements=finite))
def test_log_softmax_consistent_with_softmax(x):
    np.testing.assert_allclose(np.exp(T.log_softmax(Tensor(x)).data), T.softmax(Tensor(x)).data, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_forward_is_deterministic(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 5)).astype(np.float32)
    w = rng.standard_normal((5, 3)).astype(np.float32)
    a = T.tsum(T.softmax(Tensor(x) @ Tensor(w), axis=0), axis=1).data
    b = T.tsum(T.softmax(Tensor(x) @ Tensor(w), axis=0), axis=1).data
    assert a.tobytes() == b.tobytes()
