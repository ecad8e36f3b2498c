import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings as hypothesis_settings, strategies as st
from hypothesis.extra.numpy import arrays

from apps.numeric import ops
from apps.numeric.exceptions import ContractError, NonFiniteError, ShapeError
from apps.numeric.gradcheck import finite_diff_grad, gradient_errors, relative_error
from apps.numeric.optim import sgd_step
from apps.numeric.rng import Rng
from apps.numeric.tensor import Tape, Tensor

finite_floats = st.floats(min_value=-50, max_value=50, allow_nan=False, allow_infinity=False)


def _param(array, name=''):
    return Tensor(array, requires_grad=True, name=name)


class TensorTests(SimpleTestCase):
    def test_buffers_are_read_only(self):
        tensor = Tensor([1.0, 2.0])
        with self.assertRaises(ValueError):
            tensor.data[0] = 5.0

    def test_assign_rejects_shape_change(self):
        tensor = Tensor(np.zeros((2, 3)))
        with self.assertRaises(ShapeError):
            tensor.assign(np.zeros((3, 2)))

    def test_item_needs_single_element(self):
        with self.assertRaises(ContractError):
            Tensor([1.0, 2.0]).item()

    def test_check_finite(self):
        with self.assertRaises(NonFiniteError):
            Tensor([1.0, np.nan]).check_finite('probe')


class TapeContractTests(SimpleTestCase):
    def test_backward_twice_is_rejected(self):
        x = _param([1.0, 2.0])
        with Tape() as tape:
            loss = ops.sum(ops.mul(x, x))
        tape.backward(loss)
        with self.assertRaises(ContractError):
            tape.backward(loss)

    def test_reset_allows_reuse(self):
        x = _param([3.0])
        tape = Tape()
        with tape:
            loss = ops.sum(ops.mul(x, x))
        tape.backward(loss)
        tape.reset()
        x.zero_grad()
        with tape:
            loss = ops.sum(ops.scale(x, 4.0))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [4.0])

    def test_non_scalar_loss_is_rejected(self):
        x = _param([1.0, 2.0])
        with Tape() as tape:
            out = ops.scale(x, 2.0)
        with self.assertRaises(ContractError):
            tape.backward(out)

    def test_loss_from_another_tape_is_rejected(self):
        x = _param([1.0])
        with Tape():
            loss = ops.sum(x)
        with Tape() as other:
            ops.sum(ops.scale(x, 2.0))
        with self.assertRaises(ContractError):
            other.backward(loss)

    def test_nothing_recorded_without_tape(self):
        x = _param([1.0])
        out = ops.scale(x, 2.0)
        self.assertFalse(out.requires_grad)

    def test_gradients_accumulate_over_reuse(self):
        x = _param([2.0])
        with Tape() as tape:
            loss = ops.sum(ops.add(ops.mul(x, x), ops.scale(x, 3.0)))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [7.0])

    def test_frozen_inputs_get_no_gradient(self):
        w = Tensor(np.ones((2, 2)))
        x = _param([1.0, 2.0])
        with Tape() as tape:
            loss = ops.sum(ops.matmul(w, x))
        tape.backward(loss)
        self.assertIsNone(w.grad)
        np.testing.assert_allclose(x.grad, [2.0, 2.0])


class OperationTests(SimpleTestCase):
    def test_matmul_shape_error(self):
        with self.assertRaises(ShapeError):
            ops.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_add_broadcast_error(self):
        with self.assertRaises(ShapeError):
            ops.add(np.ones((2, 3)), np.ones((4,)))

    def test_getitem_fancy_index_gradient(self):
        x = _param(np.arange(4.0))
        with Tape() as tape:
            loss = ops.sum(ops.getitem(x, np.array([0, 0, 3])))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, 0.0, 0.0, 1.0])

    def test_masked_softmax_zeros_masked_entries(self):
        out = ops.masked_softmax(np.array([[1.0, 5.0, 2.0]]), np.array([[True, False, True]]))
        self.assertEqual(out.data[0, 1], 0.0)
        self.assertAlmostEqual(out.data.sum(), 1.0, places=14)

    def test_cross_entropy_uniform_logits(self):
        loss = ops.cross_entropy(np.zeros((3, 4)), np.array([0, 1, 2]))
        self.assertAlmostEqual(loss.item(), np.log(4.0), places=12)

    def test_dropout_is_identity_in_eval_mode(self):
        x = Tensor(np.ones((3, 3)))
        self.assertIs(ops.dropout(x, 0.5, training=False), x)

    def test_dropout_training_needs_rng(self):
        with self.assertRaises(ValueError):
            ops.dropout(Tensor(np.ones(3)), 0.5, training=True)

    def test_layer_norm_rejects_bad_eps(self):
        with self.assertRaises(ValueError):
            ops.layer_norm(np.ones((2, 3)), np.ones(3), np.zeros(3), eps=0.0)

    @given(arrays(np.float64, (3, 5), elements=finite_floats))
    def test_softmax_is_on_the_simplex(self, logits):
        out = ops.softmax(logits).data
        self.assertTrue(np.all(out >= 0))
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    @given(arrays(np.float64, (4, 6), elements=st.floats(-10, 10)))
    def test_layer_norm_centers_and_scales(self, values):
        out = ops.layer_norm(values, np.ones(6), np.zeros(6)).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
        variance = ((values - values.mean(axis=-1, keepdims=True)) ** 2).mean(axis=-1)
        np.testing.assert_allclose(out.var(axis=-1), variance / (variance + ops.DEFAULT_EPS), atol=1e-10)

    @given(st.integers(0, 3), st.integers(0, 4))
    def test_bilinear_is_exact_at_integer_positions(self, row, col):
        grid = np.arange(4 * 5 * 2, dtype=np.float64).reshape(4, 5, 2)
        np.testing.assert_array_equal(ops.bilinear_sample(grid, (row, col)).data, grid[row, col])

    def test_bilinear_midpoint_and_clamping(self):
        grid = np.zeros((2, 2, 1))
        grid[1, 1, 0] = 4.0
        self.assertAlmostEqual(ops.bilinear_sample(grid, (0.5, 0.5)).item(), 1.0)
        self.assertAlmostEqual(ops.bilinear_sample(grid, (7.0, -3.0)).item(), 0.0)
        self.assertAlmostEqual(ops.bilinear_sample(grid, (9.0, 9.0)).item(), 4.0)


class GradientOracleTests(SimpleTestCase):
    def test_finite_diff_of_quadratic(self):
        grad = finite_diff_grad(lambda t: float(np.sum(t.data ** 2)), np.array([1.0, -2.0, 0.5]))
        np.testing.assert_allclose(grad, [2.0, -4.0, 1.0], atol=1e-8)

    def test_finite_diff_needs_positive_step(self):
        with self.assertRaises(ContractError):
            finite_diff_grad(lambda t: 0.0, np.zeros(2), h=0.0)

    def test_relative_error_floor(self):
        self.assertEqual(relative_error(np.zeros(3), np.zeros(3)), 0.0)

    def _check(self, loss_fn, params, tolerance=1e-6, h=1e-5):
        errors = gradient_errors(loss_fn, params, h=h)
        for name, error in errors.items():
            self.assertLess(error, tolerance, name)

    def test_composite_graph_gradients(self):
        rng = Rng(3)
        a = _param(rng.normal((4, 3)), 'a')
        b = _param(rng.normal((3, 5)), 'b')
        gain = _param(rng.uniform(0.5, 1.5, 5), 'gain')
        bias = _param(rng.normal(5), 'bias')
        weights = rng.child('w').normal((4, 5))

        def loss():
            h = ops.layer_norm(ops.matmul(a, b), gain, bias)
            mixed = ops.mul(ops.tanh(h), ops.softmax(h))
            return ops.sum(ops.mul(ops.concat([mixed, ops.relu(h)], axis=0), np.vstack([weights, weights])))

        self._check(loss, {'a': a, 'b': b, 'gain': gain, 'bias': bias})

    def test_bilinear_gradients_reach_map_and_positions(self):
        rng = Rng(5)
        grid = _param(rng.normal((4, 4, 3)), 'grid')
        positions = _param(rng.uniform(0.2, 2.8, (6, 2)), 'positions')
        weights = rng.child('w').normal((6, 3))

        def loss():
            return ops.sum(ops.mul(ops.bilinear_sample(grid, positions), weights))

        self._check(loss, {'grid': grid, 'positions': positions})

    def test_cross_entropy_and_mse_gradients(self):
        rng = Rng(9)
        logits = _param(rng.normal((5, 4)), 'logits')
        labels = np.array([0, 3, 1, 1, 2])
        target = rng.normal((5, 4))

        def loss():
            return ops.add(ops.cross_entropy(logits, labels), ops.mse_loss(logits, target))

        self._check(loss, {'logits': logits})


class RngTests(SimpleTestCase):
    def test_same_seed_same_stream(self):
        np.testing.assert_array_equal(Rng(7).child('a', 1).normal(5), Rng(7).child('a', 1).normal(5))

    def test_children_are_independent_of_parent_use(self):
        parent = Rng(7)
        before = parent.child('x').normal(3)
        parent.normal(100)
        np.testing.assert_array_equal(parent.child('x').normal(3), before)

    def test_distinct_keys_give_distinct_streams(self):
        self.assertFalse(np.allclose(Rng(7).child('a').normal(5), Rng(7).child('b').normal(5)))

    def test_orthogonal(self):
        q = Rng(2).orthogonal(6)
        np.testing.assert_allclose(q @ q.T, np.eye(6), atol=1e-12)


class SgdTests(SimpleTestCase):
    @hypothesis_settings(max_examples=25)
    @given(st.floats(0.0, 1.0))
    def test_step_moves_against_gradient_and_clears(self, lr):
        x = _param([1.0, -1.0])
        frozen_update = Tensor([5.0])
        with Tape() as tape:
            loss = ops.sum(ops.mul(x, x))
        tape.backward(loss)
        sgd_step([x, frozen_update], lr)
        np.testing.assert_allclose(x.data, [1.0 - 2.0 * lr, -1.0 + 2.0 * lr])
        self.assertIsNone(x.grad)
        np.testing.assert_array_equal(frozen_update.data, [5.0])
