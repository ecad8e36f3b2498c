import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings as hypothesis_settings, strategies as st

from apps.adapters.accounting import closed_form_param_count, dual_rank_for_budget, param_count
from apps.adapters.exceptions import AdapterConfigError, CheckpointError
from apps.adapters.initialization import init_adapter
from apps.adapters.layers import (
    adapter_forward, dual_lora_branch, effective_update, frozen_forward, moe_gates, top_k_mask,
)
from apps.adapters.params import (
    DualLoraParams, FrozenLinear, GateStrategy, ScaleRule, default_alpha, scaling_factor,
)
from apps.adapters.serialization import load_adapter, save_adapter, sidecar_path
from apps.numeric import ops
from apps.numeric.exceptions import ShapeError
from apps.numeric.gradcheck import gradient_errors
from apps.numeric.rng import Rng
from apps.numeric.tensor import Tensor


def _layer(d_in, d_out, seed=0):
    return FrozenLinear.from_array(Rng(seed).child('W').normal((d_out, d_in)))


def _randomise_outputs(params, seed):
    rng = Rng(seed).child('outputs')
    for name, tensor in params.trainable().items():
        if name.endswith('B'):
            tensor.assign(rng.child(name).normal(tensor.shape))
    return params


class ParamCountTests(SimpleTestCase):
    def test_reference_counts_at_4096(self):
        self.assertEqual(closed_form_param_count('lora', 4096, 4096, 64), 524288)
        self.assertEqual(closed_form_param_count('dual_lora', 4096, 4096, 64), 786560)
        self.assertEqual(closed_form_param_count('moe', 4096, 4096, [16, 16, 16, 16]), 540672)

    def test_rank_sweep(self):
        for rank in (32, 64, 128):
            self.assertEqual(closed_form_param_count('lora', 4096, 4096, rank), rank * 8192)
            self.assertEqual(closed_form_param_count('dual_lora', 4096, 4096, rank), rank * 12288 + 2 * rank)

    def test_built_adapters_match_closed_form(self):
        for kind, rank, options in (('lora', 4, {}), ('dual_lora', 4, {}), ('dual_lora', 4, {'use_norm': False}),
                                    ('moe', [3, 2, 1], {})):
            params = init_adapter(kind, (10, 7), rank, **options)
            counted = sum(t.size for t in params.trainable().values())
            self.assertEqual(param_count(params), counted, kind)

    def test_dual_rank_for_budget(self):
        budget = closed_form_param_count('lora', 64, 64, 64)
        rank = dual_rank_for_budget(64, 64, budget)
        self.assertLessEqual(closed_form_param_count('dual_lora', 64, 64, rank), budget)
        self.assertGreater(closed_form_param_count('dual_lora', 64, 64, rank + 1), budget)


class InitializationTests(SimpleTestCase):
    def test_zero_output_projection_leaves_frozen_output(self):
        layer = _layer(6, 5)
        x = Rng(1).normal((3, 6))
        for kind, rank in (('lora', 2), ('dual_lora', 2), ('moe', [2, 2])):
            params = init_adapter(kind, (6, 5), rank)
            np.testing.assert_allclose(adapter_forward(layer, params, x).data, frozen_forward(layer, x).data)

    def test_default_alpha_and_scaling(self):
        params = init_adapter('lora', (4, 4), 8)
        self.assertEqual(params.alpha, default_alpha(8))
        self.assertEqual(params.scaling, 0.5)
        self.assertEqual(scaling_factor(8, 16.0, ScaleRule.ALPHA_OVER_R), 2.0)

    def test_same_seed_same_weights(self):
        first = init_adapter('dual_lora', (5, 5), 3, seed=4)
        second = init_adapter('dual_lora', (5, 5), 3, seed=4)
        np.testing.assert_array_equal(first.S.data, second.S.data)
        np.testing.assert_array_equal(first.T.data, second.T.data)

    def test_rejects_bad_ranks(self):
        with self.assertRaises(AdapterConfigError):
            init_adapter('lora', (4, 4), 0)
        with self.assertRaises(AdapterConfigError):
            init_adapter('moe', (4, 4), [2, 2], strategy=GateStrategy.TOP_K, top_k=3)

    def test_frozen_weight_is_never_trainable(self):
        layer = FrozenLinear(Tensor(np.eye(3), requires_grad=True))
        self.assertFalse(layer.weight.requires_grad)


class ForwardTests(SimpleTestCase):
    def test_shape_mismatch(self):
        params = init_adapter('lora', (4, 3), 2)
        with self.assertRaises(ShapeError):
            adapter_forward(_layer(5, 3), params, np.ones(5))
        with self.assertRaises(ShapeError):
            adapter_forward(_layer(4, 3), params, np.ones(6))

    def test_single_token_and_batch_agree(self):
        layer = _layer(6, 4)
        params = _randomise_outputs(init_adapter('dual_lora', (6, 4), 3), 2)
        x = Rng(2).normal((5, 6))
        batch = adapter_forward(layer, params, x).data
        for index in range(5):
            np.testing.assert_allclose(adapter_forward(layer, params, x[index]).data, batch[index], atol=1e-12)

    def test_dropout_only_in_training(self):
        layer = _layer(6, 4)
        params = _randomise_outputs(init_adapter('lora', (6, 4), 3, dropout=0.5), 3)
        x = Rng(3).normal((8, 6))
        eval_out = adapter_forward(layer, params, x).data
        np.testing.assert_array_equal(adapter_forward(layer, params, x).data, eval_out)
        train_out = adapter_forward(layer, params, x, training=True, rng=Rng(0)).data
        self.assertFalse(np.allclose(train_out, eval_out))

    def test_dead_gate_channel_contributes_nothing(self):
        layer = _layer(4, 3)
        params = _randomise_outputs(init_adapter('dual_lora', (4, 3), 3), 5)
        x = np.abs(Rng(5).normal((6, 4)))
        # Row 0 of T is negative on the positive orthant
        params.T.assign(np.vstack([-np.ones(4), params.T.data[1:]]))
        changed = params.B.data.copy()
        changed[:, 0] += 100.0
        before = adapter_forward(layer, params, x).data
        params.B.assign(changed)
        np.testing.assert_allclose(adapter_forward(layer, params, x).data, before, atol=1e-12)

    def test_gate_liveness_near_half_at_init(self):
        params = init_adapter('dual_lora', (32, 8), 16, seed=1)
        activations = dual_lora_branch(params, Rng(7).normal((512, 32)))
        self.assertAlmostEqual(activations.gate_liveness(), 0.5, delta=0.1)

    def test_ablations_change_the_branch(self):
        x = Rng(8).normal((4, 6))
        full = dual_lora_branch(init_adapter('dual_lora', (6, 3), 3, seed=2), x)
        no_gate = dual_lora_branch(init_adapter('dual_lora', (6, 3), 3, seed=2, use_gate_activation=False), x)
        no_norm = dual_lora_branch(init_adapter('dual_lora', (6, 3), 3, seed=2, use_norm=False), x)
        self.assertTrue(np.any(no_gate.gate.data < 0))
        self.assertTrue(np.all(full.gate.data >= 0))
        np.testing.assert_allclose(no_norm.skill.data, x @ init_adapter('dual_lora', (6, 3), 3, seed=2).S.data.T)
        np.testing.assert_allclose(full.skill.data.mean(axis=-1), 0.0, atol=1e-10)

    def test_observer_sees_activations(self):
        seen = []
        params = init_adapter('dual_lora', (4, 2), 2)
        adapter_forward(_layer(4, 2), params, np.ones((3, 4)), observer=seen.append)
        self.assertEqual(len(seen), 1)
        self.assertEqual(seen[0].rectified.shape, (3, 2))


class GateTests(SimpleTestCase):
    @hypothesis_settings(max_examples=30)
    @given(st.integers(1, 5), st.integers(0, 1000))
    def test_top_k_selects_exactly_k(self, k, seed):
        params = init_adapter('moe', (6, 3), [1] * 5, seed=seed, strategy=GateStrategy.TOP_K, top_k=k)
        gates = moe_gates(params, Rng(seed).normal((7, 6))).data
        np.testing.assert_array_equal((gates > 0).sum(axis=-1), k)
        np.testing.assert_allclose(gates.sum(axis=-1), 1.0, atol=1e-12)

    @hypothesis_settings(max_examples=20)
    @given(st.integers(1, 5), st.integers(0, 1000))
    def test_top_k_over_every_expert_is_dense_softmax(self, experts, seed):
        layer = _layer(6, 4, seed)
        sparse = _randomise_outputs(init_adapter('moe', (6, 4), [2] * experts, seed=seed,
                                                 strategy=GateStrategy.TOP_K, top_k=experts), seed)
        dense = replace(sparse, strategy=GateStrategy.SOFTMAX_DENSE, top_k=None)
        self.assertIs(dense.router, sparse.router)
        x = Rng(seed).child('x').normal((5, 6))
        np.testing.assert_allclose(adapter_forward(layer, sparse, x).data, adapter_forward(layer, dense, x).data,
                                   rtol=0, atol=1e-12)

    def test_unselected_experts_are_skipped(self):
        layer = _layer(6, 4)
        params = _randomise_outputs(init_adapter('moe', (6, 4), [1] * 4, seed=3, strategy=GateStrategy.TOP_K,
                                                 top_k=2), 3)
        x = Rng(3).normal((1, 6))
        expected = adapter_forward(layer, params, x).data
        idle = np.flatnonzero(moe_gates(params, x).data[0] == 0.0)
        self.assertEqual(len(idle), 2)
        for index in idle:
            params.experts[index].B.assign(np.full((4, 1), np.nan))
        np.testing.assert_array_equal(adapter_forward(layer, params, x).data, expected)

    def test_top_k_mask_breaks_ties_by_index(self):
        mask = top_k_mask(np.array([[1.0, 1.0, 1.0]]), 2)
        np.testing.assert_array_equal(mask, [[True, True, False]])

    def test_dense_and_rectified_gates(self):
        x = Rng(4).normal((5, 6))
        dense = moe_gates(init_adapter('moe', (6, 3), [2] * 4, strategy=GateStrategy.SOFTMAX_DENSE), x).data
        self.assertTrue(np.all(dense > 0))
        np.testing.assert_allclose(dense.sum(axis=-1), 1.0, atol=1e-12)
        rectified = moe_gates(init_adapter('moe', (6, 3), [2] * 4, strategy=GateStrategy.RECTIFIED), x).data
        self.assertTrue(np.all(rectified >= 0))


class GradientTests(SimpleTestCase):
    def _errors(self, kind, rank, seed, **options):
        layer = _layer(6, 5, seed)
        params = _randomise_outputs(init_adapter(kind, (6, 5), rank, seed=seed, **options), seed)
        x = Tensor(Rng(seed).child('x').normal((4, 6)))
        weights = Rng(seed).child('R').normal((4, 5))
        errors = gradient_errors(lambda: ops.sum(ops.mul(adapter_forward(layer, params, x), weights)),
                                 params.trainable())
        self.assertIsNone(layer.weight.grad)
        return errors

    def test_adapter_gradients_match_finite_differences(self):
        cases = (
            ('lora', 3, {}),
            ('dual_lora', 3, {}),
            ('dual_lora', 3, {'use_norm': False}),
            ('moe', [2, 2, 1], {'strategy': GateStrategy.TOP_K, 'top_k': 2}),
            ('moe', [2, 2, 1], {'strategy': GateStrategy.SOFTMAX_DENSE}),
            ('moe', [2, 2, 1], {'strategy': GateStrategy.RECTIFIED}),
        )
        for kind, rank, options in cases:
            for seed in range(3):
                for name, error in self._errors(kind, rank, seed, **options).items():
                    self.assertLess(error, 1e-4, f'{kind} {options} seed {seed} {name}')


class EffectiveUpdateTests(SimpleTestCase):
    def test_binary_gate_selects_rank_one_terms(self):
        params = _randomise_outputs(init_adapter('dual_lora', (5, 4), 3), 1)
        gate = np.array([1.0, 0.0, 1.0])
        expected = np.outer(params.B.data[:, 0], params.S.data[0]) + np.outer(params.B.data[:, 2], params.S.data[2])
        np.testing.assert_allclose(effective_update(params, gate), expected, atol=1e-12)

    def test_rejects_non_binary_gate(self):
        params = init_adapter('dual_lora', (5, 4), 3)
        with self.assertRaises(ValueError):
            effective_update(params, [0.5, 1.0, 0.0])
        with self.assertRaises(ShapeError):
            effective_update(params, [1.0, 0.0])


class SerializationTests(SimpleTestCase):
    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.addCleanup(self.directory.cleanup)
        self.path = Path(self.directory.name) / 'adapter.dlra'

    def test_round_trip_preserves_forward(self):
        layer = _layer(6, 4)
        x = Rng(6).normal((3, 6))
        for kind, rank, options in (('lora', 2, {}), ('dual_lora', 3, {'use_gate_activation': False}),
                                    ('moe', [2, 1], {'strategy': GateStrategy.RECTIFIED})):
            params = _randomise_outputs(init_adapter(kind, (6, 4), rank, **options), 6)
            save_adapter(self.path, params)
            restored = load_adapter(self.path)
            self.assertEqual(type(restored), type(params))
            np.testing.assert_array_equal(adapter_forward(layer, restored, x).data,
                                          adapter_forward(layer, params, x).data)

    def test_loaded_dual_flags(self):
        save_adapter(self.path, init_adapter('dual_lora', (4, 4), 2, use_norm=False))
        restored = load_adapter(self.path)
        self.assertIsInstance(restored, DualLoraParams)
        self.assertFalse(restored.use_norm)

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            load_adapter(self.path)

    def test_bad_magic_and_truncation(self):
        save_adapter(self.path, init_adapter('lora', (4, 4), 2))
        blob = self.path.read_bytes()
        self.path.write_bytes(b'XXXX' + blob[4:])
        with self.assertRaises(CheckpointError):
            load_adapter(self.path)
        self.path.write_bytes(blob[:-5])
        with self.assertRaises(CheckpointError):
            load_adapter(self.path)

    def test_name_that_is_not_utf8(self):
        save_adapter(self.path, init_adapter('lora', (4, 4), 2))
        blob = bytearray(self.path.read_bytes())
        # first tensor name starts after the header and its u16 length
        blob[12] = 0xff
        self.path.write_bytes(bytes(blob))
        with self.assertRaises(CheckpointError):
            load_adapter(self.path)

    def test_broken_sidecar(self):
        save_adapter(self.path, init_adapter('lora', (4, 4), 2))
        sidecar = sidecar_path(self.path)
        for text in ('{"kind": "lora", ', '[1, 2]', '{"kind": "lora"}', '{"kind": "conv"}'):
            sidecar.write_text(text, encoding='utf-8')
            with self.assertRaises(CheckpointError, msg=text):
                load_adapter(self.path)
        sidecar.unlink()
        with self.assertRaises(CheckpointError):
            load_adapter(self.path)

    def test_sidecar_next_to_binary(self):
        save_adapter(self.path, init_adapter('lora', (4, 4), 2))
        self.assertTrue(sidecar_path(self.path).exists())
