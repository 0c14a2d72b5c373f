import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ecodistill.autodiff import Tape, bounded, gradient_check, ops, raw_for, value
from ecodistill.errors import DetachedVariable, InvalidBounds, ShapeMismatch

finite = st.floats(-50, 50, allow_nan=False)


def grad(f, *xs):
    tape = Tape()
    leaves = [tape.var(x) for x in xs]
    g = tape.backward(f(*leaves))
    return [g[v] for v in leaves]


class TestScalarOps:
    def test_mul(self):
        tape = Tape()
        a, b = tape.var(3.0), tape.var(4.0)
        y = ops.mul(a, b)
        assert y.value == 12.0
        g = tape.backward(y)
        assert g[a] == 4.0 and g[b] == 3.0

    def test_relu(self):
        assert grad(ops.relu, -2.0) == [0.0]
        assert value(ops.relu(-2.0)) == 0.0
        assert grad(ops.relu, 2.0) == [1.0]
        assert grad(ops.relu, 0.0) == [1.0]

    def test_square(self):
        assert grad(lambda x: x * x, 3.0) == [6.0]

    def test_sigmoid_at_zero(self):
        assert grad(ops.sigmoid, 0.0) == [0.25]

    def test_softplus_chain(self):
        (g,) = grad(lambda x: ops.ln(ops.exp(x) + 1.0), 0.0)
        assert g == pytest.approx(0.5, abs=1e-15)

    def test_min_max_ties_go_to_first_argument(self):
        assert grad(ops.minimum, 1.0, 1.0) == [1.0, 0.0]
        assert grad(ops.maximum, 1.0, 1.0) == [1.0, 0.0]
        assert grad(ops.minimum, 2.0, 1.0) == [0.0, 1.0]

    def test_plain_inputs_pass_through(self):
        assert ops.add(1.0, 2.0) == 3.0
        assert ops.sigmoid(0.0) == 0.5

    def test_operator_overloads(self):
        (a, b) = grad(lambda x, y: (x - y) / y + 2.0 ** x, 1.0, 2.0)
        assert a == pytest.approx(0.5 + math.log(2.0) * 2.0)
        assert b == pytest.approx(-1.0 / 4.0)

    def test_reused_variable_accumulates(self):
        assert grad(lambda x: x * x * x + x, 2.0) == [13.0]

    def test_mixed_tapes_rejected(self):
        a, b = Tape().var(1.0), Tape().var(2.0)
        with pytest.raises(DetachedVariable):
            ops.add(a, b)

    def test_nonscalar_loss_rejected(self):
        t = Tape()
        x = t.var(np.ones(3))
        with pytest.raises(ShapeMismatch):
            t.backward(x)

    @given(finite, finite)
    def test_product_rule(self, a, b):
        ga, gb = grad(ops.mul, a, b)
        assert ga == b and gb == a


class TestTensorOps:
    def test_layer_norm_of_constant(self):
        np.testing.assert_array_equal(ops.layer_norm(np.array([1.0, 1.0, 1.0])), np.zeros(3))

    def test_rank_limit(self):
        with pytest.raises(ShapeMismatch):
            Tape().var(np.zeros((2, 2, 2)))

    def test_matmul_grad_matches_fd(self):
        rng = np.random.default_rng(0)
        A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        assert gradient_check(lambda a, b: ops.sum(ops.square(ops.matmul(a, b))), [A, B]) < 1e-7

    def test_broadcast_bias_grad(self):
        rng = np.random.default_rng(1)
        X, b = rng.normal(size=(5, 3)), rng.normal(size=3)
        gx, gb = grad(lambda x, y: ops.sum(ops.add(x, y)), X, b)
        np.testing.assert_array_equal(gb, np.full(3, 5.0))
        np.testing.assert_array_equal(gx, np.ones((5, 3)))

    def test_layer_norm_grad(self):
        x = np.array([[0.3, -1.2, 2.0, 0.7], [1.0, 1.5, -0.5, 0.0]])
        w = np.arange(8.0).reshape(2, 4)
        assert gradient_check(lambda v: ops.sum(ops.mul(ops.layer_norm(v), w)), x) < 1e-6

    def test_take_index_stack_concat(self):
        table = np.arange(6.0).reshape(3, 2)

        def f(t):
            rows = ops.take(t, [0, 2, 2])
            parts = ops.concat([rows, ops.square(rows)], axis=-1)
            return ops.sum(ops.stack([ops.index(parts, (1, 3)), ops.index(parts, (0, 0))]))

        assert gradient_check(f, table) < 1e-7

    @given(st.lists(finite, min_size=1, max_size=12))
    def test_sum_of_squares(self, xs):
        x = np.array(xs)
        assert gradient_check(lambda v: ops.sum(ops.square(v)), x, eps=1e-4) < 1e-7

    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=6))
    def test_smooth_composite(self, xs):
        x = np.array(xs)
        f = lambda v: ops.sum(ops.tanh(v) * ops.sigmoid(v * 2.0)) + ops.mean(ops.exp(v * 0.3))
        assert gradient_check(f, x) < 1e-6


class TestBounded:
    def test_midpoint(self):
        assert value(bounded(0.0, 0.0, 10.0).value) == 5.0

    def test_asymptote(self):
        v = value(bounded(40.0, 0.0, 10.0).value)
        assert v <= 10.0 and v == pytest.approx(10.0)

    def test_grad_at_zero(self):
        (g,) = grad(lambda r: bounded(r, 0.0, 10.0).value, 0.0)
        assert g == 2.5

    def test_inverse(self):
        assert value(bounded(raw_for(3.0, 1.0, 7.0), 1.0, 7.0).value) == pytest.approx(3.0, abs=1e-15)

    def test_bad_bounds(self):
        with pytest.raises(InvalidBounds):
            bounded(0.0, 1.0, 1.0)
        with pytest.raises(InvalidBounds):
            raw_for(1.0, 1.0, 2.0)

    @given(st.floats(-30, 30), st.floats(-100, 100), st.floats(0.01, 100))
    def test_stays_inside(self, raw, lo, width):
        v = value(bounded(raw, lo, lo + width).value)
        assert lo <= v <= lo + width
