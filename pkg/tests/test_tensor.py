import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from clinsum import tensor as T
from clinsum.tensor import Tensor

finite = st.floats(-30, 30, allow_nan=False, allow_infinity=False)


def leaf(arr, name=None):
    return Tensor(np.asarray(arr, dtype=float), requires_grad=True, name=name)


class TestMatmul:
    def test_identity(self, rng):
        M = Tensor(rng.normal(size=(2, 2)))
        assert np.array_equal(T.matmul(Tensor(np.eye(2)), M).values, M.values)

    def test_hand_product(self):
        out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
        assert out.values.tolist() == [[19, 22], [43, 50]]

    def test_dimension_mismatch_names_shapes(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_associative(self, rng):
        for _ in range(10):
            a, b, c = (Tensor(rng.normal(size=(4, 4))) for _ in range(3))
            left = T.matmul(T.matmul(a, b), c).values
            right = T.matmul(a, T.matmul(b, c)).values
            assert np.max(np.abs(left - right)) < 1e-9


class TestSoftmax:
    def test_zero_row_is_uniform(self):
        assert np.allclose(T.softmax_rows(Tensor(np.zeros((1, 4)))).values, 0.25)

    def test_closed_form(self):
        out = T.softmax_rows(Tensor([[0.0, math.log(3)]])).values
        assert np.allclose(out, [[0.25, 0.75]], atol=1e-15)

    @given(arrays(float, (3, 5), elements=finite), finite)
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        a = T.softmax_rows(Tensor(x)).values
        b = T.softmax_rows(Tensor(x + c)).values
        assert np.all(np.abs(a.sum(axis=1) - 1) < 1e-9)
        assert np.allclose(a, b, atol=1e-12)

    def test_large_inputs_stay_finite(self):
        out = T.softmax_rows(Tensor([[1e300, -1e300, 0.0]])).values
        assert np.all(np.isfinite(out))


class TestSigmoid:
    def test_values(self):
        assert T.sigmoid_map(Tensor([[0.0]])).item() == 0.5
        assert abs(T.sigmoid_map(Tensor([[math.log(3)]])).item() - 0.75) < 1e-15

    @given(arrays(float, (2, 3), elements=st.floats(-500, 500)))
    def test_symmetry_and_range(self, x):
        s = T.sigmoid_map(Tensor(x)).values
        s_neg = T.sigmoid_map(Tensor(-x)).values
        assert np.allclose(s + s_neg, 1.0, atol=1e-12)
        assert np.all(np.isfinite(s)) and np.all((s >= 0) & (s <= 1))

    def test_strictly_inside_for_moderate_inputs(self, rng):
        s = T.sigmoid_map(Tensor(rng.normal(scale=5, size=(10, 10)))).values
        assert np.all((s > 0) & (s < 1))


class TestElementwise:
    def test_mean_pool(self):
        assert T.elementwise_and_reduce("mean_pool_rows", Tensor([[1, 3], [5, 7]])).values.tolist() == [[3, 5]]

    def test_hadamard_with_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 2)))
        assert np.array_equal(T.elementwise_and_reduce("mul_hadamard", x, Tensor.ones(3, 2)).values, x.values)

    def test_relu(self):
        assert T.elementwise_and_reduce("relu", Tensor([[-1, 0, 2]])).values.tolist() == [[0, 0, 2]]

    def test_broadcasts(self):
        assert T.broadcast_row(Tensor([[1, 2]]), 3).shape == (3, 2)
        assert T.broadcast_col(Tensor([[1], [2]]), 4).values.tolist() == [[1] * 4, [2] * 4]
        with pytest.raises(T.ShapeError):
            T.broadcast_row(Tensor(np.zeros((2, 2))), 3)

    def test_shape_incompatibility(self):
        with pytest.raises(T.ShapeError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            T.elementwise_and_reduce("cube", Tensor([[1.0]]))


class TestConcat:
    def test_shapes(self):
        assert T.concat_features(Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 4)))).shape == (3, 6)

    def test_empty_columns(self, rng):
        x = Tensor(rng.normal(size=(3, 2)))
        assert np.array_equal(T.concat_features(x, Tensor(np.zeros((3, 0)))).values, x.values)

    def test_row_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.concat_features(Tensor(np.zeros((3, 2))), Tensor(np.zeros((2, 2))))


class TestCrossEntropy:
    def test_uniform(self):
        assert abs(T.cross_entropy(Tensor(np.zeros((1, 4))), [2]).item() - math.log(4)) < 1e-12

    def test_closed_form(self):
        loss = T.cross_entropy(Tensor([[0.0, math.log(3)]]), [1]).item()
        assert abs(loss - (-math.log(0.75))) < 1e-12
        assert abs(loss - 0.2877) < 1e-4

    def test_margin_monotone(self):
        losses = [T.cross_entropy(Tensor([[m, 0, 0]]), [0]).item() for m in (1, 10, 100)]
        assert losses[0] > losses[1] > losses[2] >= 0
        assert losses[2] < 1e-40

    def test_ignore_index(self):
        logits = Tensor([[0.0, math.log(3)], [5.0, -5.0]])
        assert T.cross_entropy(logits, [1, 0], ignore_index=0).item() == pytest.approx(-math.log(0.75))

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy(Tensor(np.zeros((1, 3))), [3])


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = leaf(rng.normal(size=(2, 3)))
        with T.Tape() as tape:
            loss = T.sum_all(x)
        T.backward(loss, tape)
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_product_rule(self, rng):
        x, y = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(2, 3)))
        with T.Tape() as tape:
            loss = T.sum_all(T.mul(x, y))
        tape.backward(loss)
        assert np.array_equal(x.grad, y.values) and np.array_equal(y.grad, x.values)

    def test_fan_out_accumulates(self):
        x = leaf([[3.0]])
        with T.Tape() as tape:
            loss = T.add(x, x)
        T.backward(loss, tape)
        assert x.grad.tolist() == [[2.0]]

    def test_non_scalar_loss(self, rng):
        x = leaf(rng.normal(size=(2, 2)))
        with T.Tape() as tape:
            y = T.relu(x)
        with pytest.raises(T.TapeError):
            T.backward(y, tape)

    def test_consumed_tape(self):
        x = leaf([[1.0, 2.0]])
        with T.Tape() as tape:
            loss = T.sum_all(x)
        T.backward(loss, tape)
        with pytest.raises(T.TapeError, match="consumed"):
            T.backward(loss, tape)

    def test_tape_topological_and_untracked_not_recorded(self):
        x = leaf([[1.0]])
        with T.Tape() as tape:
            T.add(Tensor([[1.0]]), Tensor([[2.0]]))
            y = T.scale(x, 2.0)
            T.sum_all(T.mul(y, y))
        assert [n.kind for n in tape.nodes] == ["scale", "mul", "sum_all"]
        seen = set()
        for n in tape.nodes:
            for inp in n.inputs:
                assert inp.node is None or id(inp.node) in seen
            seen.add(id(n))

    def test_no_grad(self):
        x = leaf([[1.0]])
        with T.Tape() as tape, T.no_grad():
            T.scale(x, 2.0)
        assert len(tape) == 0


def _composite(rng):
    a = leaf(rng.normal(size=(3, 4)), "a")
    b = leaf(rng.normal(size=(4, 3)), "b")
    g = leaf(rng.normal(size=(1, 3)) + 1.0, "g")
    beta = leaf(rng.normal(size=(1, 3)), "beta")
    table = leaf(rng.normal(size=(6, 4)), "table")

    def f():
        e = T.embedding(table, [1, 4, 1])
        x = T.matmul(T.add(a, e), b)
        x = T.layer_norm(x, g, beta)
        y = T.softmax_rows(T.concat_features(x, T.sigmoid_map(T.matmul(T.add(a, e), T.transpose(T.embedding(table, [0, 2]))))))
        z = T.mul(T.relu(T.sub(y, Tensor([[0.1]]))), T.broadcast_row(T.mean_pool_rows(y), 3))
        z = T.add(z, T.broadcast_col(T.scale(T.mean_pool_rows(x.T).T, 0.3), 5))
        return T.add(T.sum_all(z), T.cross_entropy(T.matmul(a, b), [0, 2, 1]))

    return f, [a, b, g, beta, table]


class TestCheckGradients:
    def test_quadratic(self, rng):
        x = leaf(rng.normal(size=(3, 3)))
        rep = T.check_gradients(lambda: T.sum_all(T.mul(x, x)), [x], eps=1e-5, tol=1e-6)
        assert rep.passed and rep.max_rel_err < 1e-6

    def test_constant(self):
        x = leaf([[1.0, 2.0]])
        rep = T.check_gradients(lambda: Tensor([[3.0]]), [x])
        assert rep.passed and rep.max_rel_err == 0.0

    def test_every_primitive_in_a_composite(self, rng):
        f, params = _composite(rng)
        rep = T.check_gradients(f, params, eps=1e-5, tol=1e-4)
        assert rep.passed, rep

    @pytest.mark.parametrize("kind", ["matmul", "softmax", "layer_norm", "sigmoid", "embedding", "concat"])
    def test_corrupted_adjoint_detected(self, rng, kind):
        f, params = _composite(rng)
        with T.corrupted_rule(kind):
            rep = T.check_gradients(f, params, eps=1e-5, tol=1e-4)
        assert not rep.passed
        # hook restores the rule
        assert T.check_gradients(f, params).passed

    def test_params_restored(self, rng):
        f, params = _composite(rng)
        before = [p.values.copy() for p in params]
        T.check_gradients(f, params)
        assert all(np.array_equal(b, p.values) for b, p in zip(before, params))

    def test_nan_reported_as_failure(self):
        x = leaf([[1.0]])
        rep = T.check_gradients(lambda: T.scale(x, float("nan")), [x])
        assert not rep.passed
