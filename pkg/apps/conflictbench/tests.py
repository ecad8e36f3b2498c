import math
import tempfile
from dataclasses import replace
from pathlib import Path
from unittest import skipUnless

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase
from hypothesis import given, settings as hypothesis_settings, strategies as st
from hypothesis.extra.numpy import arrays

from apps.adapters.exceptions import AdapterConfigError, CheckpointError
from apps.adapters.params import AdapterKind, GateStrategy
from apps.adapters.serialization import load_tensors, save_tensors, sidecar_path
from apps.conflictbench.data import SyntheticTaskSpec, generate_conflict_dataset
from apps.conflictbench.entropy import entropy_analysis, histogram_entropy, mean_entropies
from apps.conflictbench.exceptions import TrainingDiverged
from apps.conflictbench.experiment_service import ConflictExperimentService, param_table
from apps.conflictbench.latency import LatencyRow, latency_bench, normalize, ordering_holds, summarize
from apps.conflictbench.model import ToyConfig, ToyModel, load_model, save_model
from apps.conflictbench.training import TrainConfig, evaluate, train
from apps.conflictbench.variants import Matching, build_variant, parse_variant

TINY = ToyConfig(d_model=16, blocks=1, grid=(2, 2), token_channels=4, vce_levels=2, vce_heads=1, vce_points=2)


def _datasets(conflict=1.0, samples=32, seed=0, config=TINY):
    spec = SyntheticTaskSpec.create(num_tasks=config.num_tasks, input_dim=config.input_dim,
                                    output_dim=config.output_dim, conflict=conflict, seed=seed)
    return generate_conflict_dataset(spec, samples, seed).split(0.25)


def _model(variant='dual_lora', seed=0, rank=4, config=TINY):
    built = build_variant(variant, rank, config.d_model)
    return ToyModel(config, backbone_seed=seed, use_vce=built.use_vce, vce_seed=seed).inject(built, seed)


def _train_config(**overrides):
    values = dict(stage1_steps=3, stage2_steps=4, lr=0.05, batch_size=4, rank=4, log_every=2, monitor_size=8)
    values.update(overrides)
    return TrainConfig(**values)


class DatasetTests(SimpleTestCase):
    def test_full_conflict_negates_the_second_task(self):
        spec = SyntheticTaskSpec.create(conflict=1.0, seed=1)
        np.testing.assert_allclose(spec.maps[1], -spec.maps[0])

    def test_no_conflict_makes_tasks_identical(self):
        spec = SyntheticTaskSpec.create(num_tasks=3, conflict=0.0, seed=1)
        np.testing.assert_allclose(spec.maps[2], spec.maps[0])

    def test_inputs_shared_across_tasks(self):
        dataset = generate_conflict_dataset(SyntheticTaskSpec.create(seed=2), 10, 2)
        np.testing.assert_array_equal(dataset.task_ids[:4], [0, 1, 0, 1])
        np.testing.assert_array_equal(dataset.inputs[0], dataset.inputs[1])
        np.testing.assert_allclose(dataset.targets[0], -dataset.targets[1])

    def test_split_keeps_held_out_inputs_unseen(self):
        train_set, eval_set = _datasets(samples=40)
        self.assertEqual(len(train_set) + len(eval_set), 40)
        seen = {tuple(x) for x in train_set.inputs}
        self.assertFalse(any(tuple(x) in seen for x in eval_set.inputs))

    def test_generation_is_deterministic(self):
        spec = SyntheticTaskSpec.create(seed=4)
        self.assertEqual(generate_conflict_dataset(spec, 16, 4).fingerprint(),
                         generate_conflict_dataset(spec, 16, 4).fingerprint())

    def test_invalid_arguments(self):
        with self.assertRaises(ValueError):
            SyntheticTaskSpec.create(conflict=1.5)
        with self.assertRaises(ValueError):
            generate_conflict_dataset(SyntheticTaskSpec.create(num_tasks=3), 2, 0)


class VariantTests(SimpleTestCase):
    def test_parse(self):
        self.assertEqual(parse_variant('dual_lora+vce'), ('dual_lora', True))
        with self.assertRaises(AdapterConfigError):
            parse_variant('adapterless')

    def test_moe_baselines_share_the_rank_budget(self):
        top2 = build_variant('moe_top2', 64, 64).adapter
        self.assertEqual(top2.ranks, (16, 16, 16, 16))
        self.assertIs(top2.options['strategy'], GateStrategy.TOP_K)
        self.assertEqual(top2.options['top_k'], 2)
        self.assertGreater(len(top2.ranks), top2.options['top_k'])
        dense = build_variant('moe_softmax', 64, 64).adapter
        self.assertEqual(dense.ranks, (16, 16, 16, 16))
        self.assertIs(dense.options['strategy'], GateStrategy.SOFTMAX_DENSE)
        self.assertEqual(build_variant('moe_rectified', 64, 64).adapter.ranks, (32, 16, 8, 8))

    def test_params_matching_shrinks_dual_rank(self):
        lora = build_variant('lora', 64, 64).adapter.param_count(64, 64)
        dual = build_variant('dual_lora', 64, 64, Matching.PARAMS).adapter
        self.assertLess(dual.ranks[0], 64)
        self.assertLessEqual(dual.param_count(64, 64), lora)

    def test_ablation_options(self):
        self.assertFalse(build_variant('dual_lora_no_norm', 8, 16).adapter.options['use_norm'])
        self.assertFalse(build_variant('dual_lora_no_gate', 8, 16).adapter.options['use_gate_activation'])


class ModelTests(SimpleTestCase):
    def test_zero_initialised_adapters_do_not_change_outputs(self):
        train_set, _ = _datasets()
        bare = ToyModel(TINY, backbone_seed=0)
        adapted = _model('dual_lora')
        np.testing.assert_allclose(evaluate(adapted, train_set), evaluate(bare, train_set), atol=1e-12)

    def test_adapters_sit_on_query_and_value(self):
        model = _model('lora')
        self.assertEqual(sorted(model.adapter_slots()), ['block0.q', 'block0.v'])
        self.assertIs(model.adapter_slots()['block0.q'].kind, AdapterKind.LORA)

    def test_vce_front_end(self):
        model = _model('dual_lora+vce')
        self.assertTrue(model.vce_parameters())
        train_set, _ = _datasets(samples=8)
        outputs = model.forward(train_set.task_ids, train_set.inputs).data
        self.assertEqual(outputs.shape, (len(train_set), TINY.output_dim))
        self.assertTrue(np.all(np.isfinite(outputs)))

    def test_checkpoint_round_trip(self):
        train_set, _ = _datasets(samples=8)
        model = _model('moe_top2')
        train(model, _train_config(variant='moe_top2'), train_set)
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / 'model.dlra'
            save_model(path, model, extra={'variant': 'moe_top2'})
            restored, metadata = load_model(path)
        self.assertEqual(metadata['variant'], 'moe_top2')
        np.testing.assert_array_equal(evaluate(restored, train_set), evaluate(model, train_set))

    def test_missing_checkpoint(self):
        with self.assertRaises(CheckpointError):
            load_model(Path(tempfile.gettempdir()) / 'no-such-model.dlra')

    def test_incomplete_checkpoint(self):
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / 'model.dlra'
            save_model(path, _model('lora'))
            tensors, metadata = load_tensors(path)
            del tensors['projector']
            save_tensors(path, tensors, metadata)
            with self.assertRaises(CheckpointError):
                load_model(path)

            tensors['projector'] = np.zeros((TINY.d_model, TINY.token_channels))
            del metadata['backbone_seed']
            save_tensors(path, tensors, metadata)
            with self.assertRaises(CheckpointError):
                load_model(path)

            sidecar_path(path).write_text('not json', encoding='utf-8')
            with self.assertRaises(CheckpointError):
                load_model(path)


class TrainingTests(SimpleTestCase):
    def test_same_seed_same_metrics(self):
        train_set, eval_set = _datasets()
        first = train(_model(), _train_config(), train_set, eval_set)
        second = train(_model(), _train_config(), train_set, eval_set)
        self.assertEqual(first.losses, second.losses)
        self.assertEqual(first.eval_task_losses, second.eval_task_losses)

    def test_stage_one_leaves_adapters_untouched(self):
        train_set, _ = _datasets()
        model = _model()
        adapters = {name: tensor.numpy() for name, tensor in model.adapter_parameters().items()}
        projector = model.projector.numpy()
        train(model, _train_config(stage2_steps=0), train_set)
        for name, tensor in model.adapter_parameters().items():
            np.testing.assert_array_equal(tensor.data, adapters[name], name)
        self.assertFalse(np.array_equal(model.projector.data, projector))

    def test_backbone_stays_frozen(self):
        train_set, _ = _datasets()
        model = _model()
        frozen = {name: tensor.numpy() for name, tensor in model.frozen_parameters().items()}
        train(model, _train_config(), train_set)
        for name, tensor in model.frozen_parameters().items():
            np.testing.assert_array_equal(tensor.data, frozen[name], name)
            self.assertIsNone(tensor.grad, name)

    def test_frozen_projector_in_stage_two(self):
        train_set, _ = _datasets()
        model = _model()
        before = model.projector.numpy()
        train(model, _train_config(stage1_steps=0, stage2_train_projector=False), train_set)
        np.testing.assert_array_equal(model.projector.data, before)

    def test_zero_learning_rate_keeps_losses_constant(self):
        train_set, _ = _datasets()
        report = train(_model(), _train_config(lr=0.0), train_set)
        self.assertEqual(len(set(report.losses)), 1)
        self.assertEqual(report.steps, [0, 2, 3, 5, 7])

    def test_gate_liveness_is_tracked_for_dual_lora(self):
        train_set, _ = _datasets()
        report = train(_model(), _train_config(), train_set)
        self.assertTrue(all(0.0 <= value <= 1.0 for value in report.gate_liveness))
        lora_report = train(_model('lora'), _train_config(variant='lora'), train_set)
        self.assertTrue(all(value is None for value in lora_report.gate_liveness))

    def test_evaluate_has_no_side_effects(self):
        _, eval_set = _datasets()
        model = _model()
        first = evaluate(model, eval_set)
        np.testing.assert_array_equal(evaluate(model, eval_set), first)
        self.assertTrue(all(t.grad is None for t in model.adapter_parameters().values()))

    def test_divergence_raises_with_partial_report(self):
        train_set, _ = _datasets()
        with self.assertRaises(TrainingDiverged) as caught:
            with np.errstate(all='ignore'):
                train(_model(), _train_config(lr=1e12, stage1_steps=40, stage2_steps=0), train_set)
        self.assertTrue(caught.exception.report.diverged)
        self.assertTrue(caught.exception.report.diagnostic)


class EntropyTests(SimpleTestCase):
    def test_constant_values_have_zero_entropy(self):
        self.assertEqual(histogram_entropy(np.full(100, 3.0)).entropy, 0.0)

    def test_one_value_per_bin_gives_log_bins(self):
        self.assertAlmostEqual(histogram_entropy(np.arange(64.0)).entropy, math.log(64), places=12)

    @hypothesis_settings(max_examples=30)
    @given(arrays(np.float64, 50, elements=st.integers(-100, 100).map(float)), st.integers(0, 10_000))
    def test_entropy_ignores_order(self, values, seed):
        shuffled = np.random.default_rng(seed).permutation(values)
        self.assertAlmostEqual(histogram_entropy(values).entropy, histogram_entropy(shuffled).entropy, places=12)

    def test_empty_values(self):
        with self.assertRaises(ValueError):
            histogram_entropy([])

    def test_analysis_over_dual_slots(self):
        model = _model()
        train_set, _ = _datasets()
        layers = entropy_analysis(model, train_set.task_ids, train_set.inputs, bins=16)
        self.assertEqual([layer.layer for layer in layers], ['block0.q', 'block0.v'])
        h_skill, h_rectified = mean_entropies(layers)
        self.assertTrue(0.0 < h_skill <= math.log(16))
        self.assertTrue(0.0 <= h_rectified <= math.log(16))

    def test_analysis_needs_dual_slots_and_probes(self):
        train_set, _ = _datasets()
        with self.assertRaises(ValueError):
            entropy_analysis(_model('lora'), train_set.task_ids, train_set.inputs)
        with self.assertRaises(ValueError):
            entropy_analysis(_model(), np.array([], dtype=int), np.zeros((0, TINY.input_dim)))


class LatencyTests(SimpleTestCase):
    def test_normalize_to_lora(self):
        rows = normalize([summarize('lora', [2.0, 2.0]), summarize('dual_lora', [3.0, 3.0])])
        self.assertEqual(rows[0].ratio, 1.0)
        self.assertEqual(rows[1].ratio, 1.5)
        self.assertEqual(rows[1].cv, 0.0)
        with self.assertRaises(ValueError):
            normalize([summarize('dual_lora', [1.0])])

    def test_ordering(self):
        rows = [LatencyRow(name, 1.0, 1.0, 0.0, ratio) for name, ratio in
                (('lora', 1.0), ('dual_lora', 1.1), ('moe_top2', 1.3), ('moe_softmax', 1.6), ('dual_lora+vce', 1.2))]
        self.assertTrue(ordering_holds(rows))
        self.assertFalse(ordering_holds([replace(row, ratio=2.0) if row.variant == 'dual_lora' else row
                                         for row in rows]))
        self.assertFalse(ordering_holds(rows[:2]))

    def test_bench_needs_enough_reps(self):
        with self.assertRaises(ValueError):
            latency_bench(('lora',), d=8, reps=10)

    def test_small_bench(self):
        rows = latency_bench(('lora', 'dual_lora'), d=16, total_rank=4, reps=100, warmup=2, inner=1,
                             max_cv=float('inf'))
        self.assertEqual([row.variant for row in rows], ['lora', 'dual_lora'])
        self.assertEqual(rows[0].ratio, 1.0)
        self.assertEqual(len(rows[1].samples), 100)
        self.assertEqual(rows[1].param_count, 4 * (32 + 16) + 8)


class ExperimentServiceTests(SimpleTestCase):
    def test_run_merges_reports_in_seed_order(self):
        service = ConflictExperimentService(TINY)
        stats = service.run(['lora', 'dual_lora'], [0, 1], _train_config(), {'conflict': 1.0}, samples=16)
        self.assertEqual([(r.variant, r.seed) for r in stats['reports']],
                         [('lora', 0), ('dual_lora', 0), ('lora', 1), ('dual_lora', 1)])
        self.assertEqual(stats['failed'], 0)
        self.assertIn('h_skill', stats['reports'][1].entropy)
        won, compared = ConflictExperimentService.wins(stats['reports'], 'dual_lora', 'lora')
        self.assertEqual(compared, 2)
        self.assertLessEqual(won, 2)

    def test_checkpoints_written(self):
        service = ConflictExperimentService(TINY)
        with tempfile.TemporaryDirectory() as directory:
            service.run(['dual_lora'], [3], _train_config(), {'conflict': 1.0}, samples=16,
                        checkpoint_dir=Path(directory))
            model, metadata = load_model(Path(directory) / 'dual_lora_seed3.dlra')
        self.assertEqual(metadata['seed'], 3)
        self.assertEqual(sorted(model.adapter_slots()), ['block0.q', 'block0.v'])

    def test_param_table(self):
        rows = param_table(4096, 4096)
        self.assertEqual([row['rank'] for row in rows], [32, 64, 128])
        self.assertEqual(rows[1]['lora'], 524288)
        self.assertEqual(rows[1]['dual_lora'], 786560)
        self.assertEqual(rows[1]['moe'], 540672)

    @skipUnless(settings.RUN_EXPERIMENTS, 'long experiment; set DUALLORA_RUN_EXPERIMENTS=true')
    def test_dual_lora_beats_lora_under_conflict(self):
        service = ConflictExperimentService(ToyConfig())
        stats = service.run(['lora', 'dual_lora'], range(5), TrainConfig(), {'conflict': 1.0})
        won, compared = ConflictExperimentService.wins(stats['reports'], 'dual_lora', 'lora')
        self.assertGreaterEqual(won, 4, stats['medians'])
        dual = [r for r in stats['reports'] if r.variant == 'dual_lora']
        rectified_lower = [r.entropy['h_rectified'] < r.entropy['h_skill'] for r in dual]
        self.assertTrue(all(rectified_lower), [r.entropy for r in dual])
