"""
Tests for the tensor engine: forward values, gradients against finite
differences, precision and no-grad modes, non-finite detection, Adam.
"""

import math

import numpy as np
import numpy.testing as npt
import pytest

from swinfi.errors import ConfigError, NonFiniteError, ShapeError
from swinfi.tensor import (
    AdamState, Tensor, _node, adam_step, clip_grad_norm, gelu, get_dtype, grad_check,
    layer_norm, log_softmax, matmul, mean, no_grad, precision, roll, softmax,
    sum_of_squares, take, trunc_normal
)


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestForward:
    def test_broadcast_add_and_mul(self, f64):
        a = Tensor(np.arange(6.0).reshape(2, 3))
        b = Tensor(np.array([1.0, 2.0, 3.0]))
        npt.assert_array_equal((a + b).data, np.arange(6.0).reshape(2, 3) + [1, 2, 3])
        npt.assert_array_equal((a * b).data, np.arange(6.0).reshape(2, 3) * [1, 2, 3])

    def test_batched_matmul_shape(self, f64, rng):
        out = matmul(Tensor(rng.normal(size=(5, 2, 3, 4))), Tensor(rng.normal(size=(4, 6))))
        assert out.shape == (5, 2, 3, 6)

    def test_matmul_mismatch_raises(self, f64):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_softmax_rows_sum_to_one(self, f64, rng):
        out = softmax(Tensor(rng.normal(size=(4, 7)) * 50), axis=-1)
        npt.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_log_softmax_is_stable_for_large_logits(self, f64):
        out = log_softmax(Tensor(np.array([[1000.0, 0.0]])), axis=-1)
        npt.assert_allclose(out.data, [[0.0, -1000.0]])

    def test_gelu_tanh_approximation(self, f64):
        x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
        expected = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
        npt.assert_allclose(gelu(Tensor(x)).data, expected, rtol=1e-12)

    def test_layer_norm_standardizes_last_axis(self, f64, rng):
        x = Tensor(rng.normal(3.0, 5.0, size=(4, 16)))
        out = layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        npt.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
        npt.assert_allclose(out.std(axis=-1), 1.0, atol=1e-3)

    def test_roll_matches_numpy(self, f64, rng):
        x = rng.normal(size=(2, 3, 8, 4))
        npt.assert_array_equal(roll(Tensor(x), (-1, 4), (1, 2)).data, np.roll(x, (-1, 4), (1, 2)))

    def test_take_gathers_rows(self, f64):
        table = Tensor(np.arange(12.0).reshape(6, 2))
        out = take(table, np.array([[0, 5], [5, 1]]))
        assert out.shape == (2, 2, 2)
        npt.assert_array_equal(out.data[0, 1], [10.0, 11.0])

    def test_non_finite_result_raises(self, f64):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([1.0])) / Tensor(np.array([0.0]))


class TestGradients:
    @pytest.mark.parametrize("name, build", [
        ("add_broadcast", lambda x, y: (x + y[0]).sum()),
        ("mul", lambda x, y: (x * y).sum()),
        ("div", lambda x, y: (x / (y * y + 1.0)).sum()),
        ("matmul", lambda x, y: sum_of_squares(matmul(x, y.transpose(1, 0)))),
        ("softmax", lambda x, y: (softmax(x, axis=-1) * y).sum()),
        ("log_softmax", lambda x, y: (log_softmax(x, axis=-1) * y).sum()),
        ("gelu", lambda x, y: (gelu(x) * y).sum()),
        ("mean_axis", lambda x, y: sum_of_squares(mean(x, axis=0))),
        ("reshape_transpose", lambda x, y: (x.reshape(4, 3).transpose(1, 0) * y.reshape(3, 4)).sum()),
        ("getitem", lambda x, y: sum_of_squares(x[np.array([0, 0, 2]), 1:])),
        ("roll", lambda x, y: (roll(x, (1, -1), (0, 1)) * y).sum()),
    ])
    def test_op_gradient(self, f64, rng, name, build):
        y = Tensor(rng.normal(size=(3, 4)))
        assert grad_check(lambda x: build(x, y), leaf(rng, 3, 4)) < 1e-4

    def test_layer_norm_gradient(self, f64, rng):
        gain, bias = leaf(rng, 6), leaf(rng, 6)
        w = Tensor(rng.normal(size=(2, 6)))
        f = lambda x: (layer_norm(x, gain, bias) * w).sum()
        assert grad_check(f, leaf(rng, 2, 6)) < 1e-4

        x = Tensor(rng.normal(size=(2, 6)))
        assert grad_check(lambda g: (layer_norm(x, g, bias) * w).sum(), gain) < 1e-4
        assert grad_check(lambda b: (layer_norm(x, gain, b) * w).sum(), bias) < 1e-4

    def test_take_gradient_accumulates_repeats(self, f64, rng):
        idx = np.array([[0, 2], [2, 2]])
        w = Tensor(rng.normal(size=(2, 2, 3)))
        assert grad_check(lambda t: (take(t, idx) * w).sum(), leaf(rng, 4, 3)) < 1e-4

    def test_shared_subgraph_accumulates(self, f64):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x
        (y + y).sum().backward()
        npt.assert_allclose(x.grad, [8.0])

    def test_grad_check_of_square(self, f64):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        assert grad_check(lambda t: sum_of_squares(t), x) < 1e-8
        npt.assert_allclose(x.grad, [2.0, 4.0])

    def test_grad_check_flags_a_wrong_backward(self, f64, rng):
        def square_missing_factor(t):
            return _node(t.data ** 2, (t,), lambda g: (g * t.data,), "square")

        x = leaf(rng, 5)
        assert grad_check(lambda t: square_missing_factor(t).sum(), x) > 0.4

    def test_grad_check_constant_function(self, f64, rng):
        assert grad_check(lambda t: softmax(t, axis=-1).sum(), leaf(rng, 6)) < 1e-6

    def test_grad_check_flags_a_wrong_small_entry(self, f64):
        w = np.array([1.0, 1e-3])

        def scaled(t):
            return _node(t.data * w, (t,), lambda g: (g * np.array([1.0, 2e-3]),), "scaled")

        assert grad_check(lambda t: scaled(t).sum(), Tensor(np.ones(2), requires_grad=True)) > 0.05

    def test_grad_check_requires_float64(self):
        with precision("float32"):
            x = Tensor(np.ones(3), requires_grad=True)
            with pytest.raises(ConfigError):
                grad_check(lambda t: t.sum(), x)


class TestModes:
    def test_precision_context_restores(self):
        before = get_dtype()
        with precision("float64"):
            assert get_dtype() == np.float64
            assert Tensor([1.0]).data.dtype == np.float64
        assert get_dtype() == before

    def test_unknown_precision_rejected(self):
        with pytest.raises(ConfigError):
            with precision("float16"):
                pass

    def test_no_grad_records_no_graph(self, f64):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad
        assert (x * 2.0).requires_grad

    def test_trunc_normal_is_bounded_and_seeded(self):
        a = trunc_normal(np.random.default_rng(5), (1000,))
        b = trunc_normal(np.random.default_rng(5), (1000,))
        npt.assert_array_equal(a, b)
        assert np.abs(a).max() <= 0.04


class TestAdam:
    def test_quadratic_converges(self, f64):
        theta = Tensor(np.array([0.0]), requires_grad=True)
        params = {"theta": theta}
        state = AdamState.create(params, lr=0.1)
        for _ in range(200):
            theta.grad = None
            sum_of_squares(theta - 3.0).backward()
            adam_step(params, None, state)
        assert abs(theta.data[0] - 3.0) < 0.05
        assert state.step_count == 200

    def test_zero_lr_leaves_parameters(self, f64, rng):
        w = leaf(rng, 3)
        before = w.data.copy()
        state = AdamState.create({"w": w}, lr=0.0)
        w.grad = np.ones(3)
        adam_step({"w": w}, None, state)
        npt.assert_array_equal(w.data, before)

    def test_gradient_shape_mismatch(self, f64):
        w = Tensor(np.zeros(3), requires_grad=True)
        state = AdamState.create({"w": w})
        with pytest.raises(ShapeError):
            adam_step({"w": w}, {"w": np.zeros(4)}, state)

    def test_clip_grad_norm(self, f64):
        a = Tensor(np.zeros(2), requires_grad=True)
        a.grad = np.array([3.0, 4.0])
        norm = clip_grad_norm([a], 1.0)
        assert norm == pytest.approx(5.0)
        npt.assert_allclose(np.linalg.norm(a.grad), 1.0, rtol=1e-9)
