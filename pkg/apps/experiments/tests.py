import tempfile
from io import StringIO
from pathlib import Path
from unittest import skipUnless

import numpy as np
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings
from hypothesis import given, settings as hypothesis_settings, strategies as st

from apps.adapters.initialization import init_adapter
from apps.adapters.params import GateStrategy
from apps.experiments import charts
from apps.experiments.config_loader import ConfigFileError, load_section
from apps.experiments.forms import ParamTableConfigForm, TrainConflictConfigForm, VerifyConfigForm
from apps.experiments.manifest import (
    RunManifest, config_hash, read_csv, read_jsonl, write_csv, write_jsonl,
)
from apps.experiments.verification_service import (
    KINK_MARGIN, VerificationService, _check, kink_distance, kink_free_inputs,
)
from apps.numeric.exceptions import ContractError
from apps.numeric.gradcheck import DEFAULT_STEP
from apps.numeric.rng import Rng


class ConfigFormTests(SimpleTestCase):
    def test_defaults_validate(self):
        form = VerifyConfigForm.bind()
        self.assertTrue(form.is_valid(), form.errors)
        self.assertEqual(form.resolved()['k'], 3)
        self.assertEqual(list(form.resolved()), sorted(form.resolved()))

    def test_flags_override_file_values(self):
        form = VerifyConfigForm.bind({'k': '4'}, {'k': 5, 'd': None})
        self.assertTrue(form.is_valid(), form.errors)
        self.assertEqual(form.resolved()['k'], 5)
        self.assertEqual(form.resolved()['d'], 8)

    def test_file_values_override_defaults(self):
        form = VerifyConfigForm.bind({'k': '4'}, {'k': None})
        self.assertTrue(form.is_valid(), form.errors)
        self.assertEqual(form.resolved()['k'], 4)

    def test_unknown_key_is_rejected(self):
        form = VerifyConfigForm.bind({'bogus': '1'})
        self.assertFalse(form.is_valid())
        self.assertIn('bogus', str(form.errors))

    def test_k_above_d(self):
        self.assertFalse(VerifyConfigForm.bind(overrides={'k': 9, 'd': 8}).is_valid())

    def test_list_and_flag_fields(self):
        form = TrainConflictConfigForm.bind({'seeds': '0, 2,4', 'save_checkpoints': 'no'})
        self.assertTrue(form.is_valid(), form.errors)
        self.assertEqual(form.resolved()['seeds'], [0, 2, 4])
        self.assertFalse(form.resolved()['save_checkpoints'])
        self.assertFalse(TrainConflictConfigForm.bind({'variants': 'lora,adapterless'}).is_valid())
        self.assertFalse(ParamTableConfigForm.bind({'include_vce': 'maybe'}).is_valid())


class ConfigFileTests(SimpleTestCase):
    def test_section_values(self):
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / 'experiments.ini'
            path.write_text('[verify]\nk = 2\nd = 6\n\n[bench]\nreps = 200\n', encoding='utf-8')
            self.assertEqual(load_section(str(path), 'verify'), {'k': '2', 'd': '6'})
            self.assertEqual(load_section(str(path), 'entropy'), {})
        self.assertEqual(load_section(None, 'verify'), {})

    def test_missing_file(self):
        with self.assertRaises(ConfigFileError):
            load_section('/no/such/experiments.ini', 'verify')


class ManifestTests(SimpleTestCase):
    def test_config_hash_ignores_key_order(self):
        self.assertEqual(config_hash({'a': 1, 'b': [1, 2]}), config_hash({'b': [1, 2], 'a': 1}))
        self.assertNotEqual(config_hash({'a': 1}), config_hash({'a': 2}))

    def test_data_files_carry_the_header(self):
        manifest = RunManifest(subcommand='verify', resolved={'seed': 3, 'k': 2}, seed=3)
        with tempfile.TemporaryDirectory() as directory:
            csv_path = write_csv(Path(directory) / 'rows.csv', manifest, ['a', 'b'], [[1, 'x'], [2, 'y']])
            header, rows = read_csv(csv_path)
            jsonl_path = write_jsonl(Path(directory) / 'rows.jsonl', manifest, [{'a': 1}])
            jsonl_header, records = read_jsonl(jsonl_path)
        self.assertEqual(header['config_hash'], manifest.config_hash)
        self.assertNotIn('started_at', header)
        self.assertEqual(rows, [{'a': '1', 'b': 'x'}, {'a': '2', 'b': 'y'}])
        self.assertEqual(jsonl_header, manifest.header())
        self.assertEqual(records, [{'a': 1}])


class ChartTests(SimpleTestCase):
    def test_bar_reference_line(self):
        context = charts.bar_chart(['lora', 'dual_lora'], [1.0, 1.2], 'ratios', 'ratio', reference=1.0)
        self.assertEqual(len(context['bars']), 2)
        self.assertGreater(context['bars'][0]['y'], context['bars'][1]['y'])
        self.assertIsNotNone(context['reference'])

    def test_log_scale_drops_non_positive_points(self):
        context = charts.line_chart({'loss': ([0, 1, 2], [1.0, 0.0, 0.01])}, 'loss', 'step', 'loss', log_y=True)
        self.assertEqual(len(context['lines'][0]['points'].split()), 2)

    def test_flat_raster_is_black(self):
        context = charts.raster([[2.0, 2.0], [2.0, 2.0]], 'flat')
        self.assertEqual({cell['gray'] for cell in context['cells']}, {'rgb(0,0,0)'})


class VerificationServiceTests(SimpleTestCase):
    def setUp(self):
        form = VerifyConfigForm.bind(overrides={'instances': 3, 'grad_instances': 1})
        self.assertTrue(form.is_valid(), form.errors)
        self.service = VerificationService(form.resolved())

    def test_prop1_checks_pass(self):
        records = self.service.run('prop1')
        self.assertEqual([r['check'] for r in records][-3:], ['rank_bound', 'collinear_rank1_fit', 'single_term'])
        self.assertTrue(all(r['passed'] for r in records), records)

    def test_gradient_checks_pass(self):
        records = self.service.run('grad')
        self.assertTrue(all(r['passed'] for r in records), records)

    def test_vce_checks_pass(self):
        records = self.service.run('vce')
        self.assertTrue(all(r['passed'] for r in records), records)

    def test_unknown_suite(self):
        with self.assertRaises(ValueError):
            self.service.run('bogus')

    @hypothesis_settings(max_examples=20, deadline=None)
    @given(st.sampled_from(['dual_lora', 'moe_top_k', 'moe_rectified']), st.integers(0, 1000))
    def test_gradient_inputs_keep_clear_of_kinks(self, case, seed):
        if case == 'dual_lora':
            params = init_adapter('dual_lora', (6, 5), 3, seed=seed)
        elif case == 'moe_top_k':
            params = init_adapter('moe', (6, 5), [2, 2, 1], seed=seed, strategy=GateStrategy.TOP_K, top_k=2)
        else:
            params = init_adapter('moe', (6, 5), [2, 2, 1], seed=seed, strategy=GateStrategy.RECTIFIED)
        x = kink_free_inputs(params, Rng(seed), (4, 6))
        self.assertGreater(kink_distance(params, x), KINK_MARGIN * DEFAULT_STEP)

    def test_inputs_on_a_kink_are_rejected(self):
        dual = init_adapter('dual_lora', (6, 5), 3)
        dual.T.assign(np.vstack([np.zeros(6), dual.T.data[1:]]))
        tied = init_adapter('moe', (6, 5), [1, 1, 1], strategy=GateStrategy.TOP_K, top_k=1)
        tied.router.assign(np.tile(tied.router.data[:1], (3, 1)))
        for params in (dual, tied):
            self.assertEqual(kink_distance(params, Rng(0).normal((4, 6))), 0.0)
            with self.assertRaises(ContractError):
                kink_free_inputs(params, Rng(0), (4, 6), attempts=3)

    def test_smooth_adapters_have_no_kinks(self):
        lora = init_adapter('lora', (6, 5), 3)
        dense = init_adapter('moe', (6, 5), [2, 2], strategy=GateStrategy.SOFTMAX_DENSE)
        self.assertEqual(kink_distance(lora, Rng(0).normal((4, 6))), float('inf'))
        self.assertEqual(kink_distance(dense, Rng(0).normal((4, 6))), float('inf'))

    def test_explicit_verdict_wins_over_the_tolerance(self):
        self.assertTrue(_check('routed', 'dual_vs_lora', 1e-6, 1e-3)['passed'])
        self.assertFalse(_check('routed', 'dual_vs_lora', 1e-6, 1e-3, verdict=False)['passed'])
        self.assertTrue(_check('routed', 'dual_vs_lora', 1.0, 1e-3, verdict=True)['passed'])


class CommandTests(SimpleTestCase):
    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.addCleanup(self.directory.cleanup)
        self.output_dir = Path(self.directory.name)
        self.settings_override = override_settings(OUTPUT_DIR=self.output_dir)
        self.settings_override.enable()
        self.addCleanup(self.settings_override.disable)

    def _call(self, *args, **options):
        stdout = StringIO()
        call_command(*args, stdout=stdout, **options)
        return stdout.getvalue()

    def assertChartsCarryManifest(self, directory, csv_name):
        header, _ = read_csv(directory / csv_name)
        charts_written = sorted(directory.glob('*.svg'))
        self.assertTrue(charts_written)
        for path in charts_written:
            text = path.read_text(encoding='utf-8')
            self.assertIn('<metadata id="manifest">', text, path.name)
            self.assertIn(header['config_hash'], text, path.name)

    def test_param_table(self):
        self._call('param_table')
        header, rows = read_csv(self.output_dir / 'param_table' / 'param_table.csv')
        self.assertEqual(header['subcommand'], 'param_table')
        self.assertEqual(rows[1]['dual_lora'], '786560')
        self.assertEqual(rows[1]['vce'], '15424')
        for name in ('param_bars.csv', 'param_table.svg', 'manifest.json'):
            self.assertTrue((self.output_dir / 'param_table' / name).is_file(), name)
        self.assertChartsCarryManifest(self.output_dir / 'param_table', 'param_table.csv')

    def test_identical_configs_give_identical_data_files(self):
        first, second = self.output_dir / 'first', self.output_dir / 'second'
        self._call('verify', 'prop1', instances=2, out=str(first))
        self._call('verify', 'prop1', instances=2, out=str(second))
        for name in ('checks.csv', 'report.jsonl'):
            self.assertEqual((first / name).read_bytes(), (second / name).read_bytes(), name)

    def test_verify_prop1(self):
        output = self._call('verify', 'prop1', k=3, d=8, instances=2)
        self.assertIn('All', output)
        _, rows = read_csv(self.output_dir / 'verify' / 'checks.csv')
        self.assertTrue(all(row['passed'] == 'True' for row in rows))

    def test_unknown_suite_is_a_usage_error(self):
        with self.assertRaises(CommandError) as caught:
            self._call('verify', 'bogus')
        self.assertEqual(caught.exception.returncode, 2)

    def test_invalid_flag_is_a_usage_error(self):
        with self.assertRaises(CommandError) as caught:
            self._call('param_table', ranks='a,b')
        self.assertEqual(caught.exception.returncode, 2)

    def test_config_file_section(self):
        path = self.output_dir / 'experiments.ini'
        path.write_text('[param_table]\nranks = 8\ninclude_vce = false\n', encoding='utf-8')
        self._call('param_table', config=str(path), d_in=16, d_out=16)
        _, rows = read_csv(self.output_dir / 'param_table' / 'param_table.csv')
        self.assertEqual(rows, [{'rank': '8', 'lora': '256', 'dual_lora': '400', 'moe': '320'}])

    def test_vce_demo(self):
        self._call('vce_demo', height=6, width=6, channels=8, levels=2, heads=1, points=2, steps=5)
        _, rows = read_csv(self.output_dir / 'vce_demo' / 'heatmap.csv')
        self.assertEqual(len(rows), 36)
        _, losses = read_csv(self.output_dir / 'vce_demo' / 'fit_loss.csv')
        self.assertEqual(len(losses), 5)
        self.assertTrue((self.output_dir / 'vce_demo' / 'heatmap.svg').is_file())
        self.assertChartsCarryManifest(self.output_dir / 'vce_demo', 'heatmap.csv')

    def test_entropy_on_fresh_model(self):
        self._call('entropy', fresh=True, probes=16, bins=8)
        _, rows = read_csv(self.output_dir / 'entropy' / 'entropy.csv')
        self.assertEqual([row['layer'] for row in rows], ['block0.q', 'block0.v', 'block1.q', 'block1.v'])

    def test_entropy_without_checkpoint_fails(self):
        with self.assertRaises(CommandError) as caught:
            self._call('entropy', checkpoint=str(self.output_dir / 'missing.dlra'))
        self.assertEqual(caught.exception.returncode, 1)

    def test_train_conflict_then_entropy_on_its_checkpoint(self):
        self._call('train_conflict', variants='lora,dual_lora', seeds='0', samples=16, stage1_steps=2,
                   stage2_steps=3, total_rank=4, d_model=16, blocks=1, log_every=1, batch_size=4)
        directory = self.output_dir / 'train_conflict'
        _, summary = read_csv(directory / 'summary.csv')
        self.assertEqual([row['variant'] for row in summary], ['lora', 'dual_lora'])
        self.assertEqual(summary[0]['diverged'], 'False')
        self.assertTrue((directory / 'dual_lora_seed0.dlra').is_file())
        _, curves = read_csv(directory / 'loss_curves.csv')
        self.assertEqual(len(curves), 2 * 6)
        self.assertChartsCarryManifest(directory, 'summary.csv')

        output = self._call('entropy', probes=8)
        self.assertIn('Mean H_skill', output)
        _, rows = read_csv(self.output_dir / 'entropy' / 'entropy.csv')
        self.assertEqual([row['layer'] for row in rows], ['block0.q', 'block0.v'])

    def test_bench(self):
        self._call('bench', variants='lora,dual_lora', d=16, total_rank=4, reps=100, warmup=1, inner=1, max_cv=1000)
        _, rows = read_csv(self.output_dir / 'bench' / 'latency.csv')
        self.assertEqual([row['variant'] for row in rows], ['lora', 'dual_lora'])
        self.assertEqual(float(rows[0]['ratio']), 1.0)
        _, samples = read_csv(self.output_dir / 'bench' / 'samples.csv')
        self.assertEqual(len(samples), 200)
        self.assertChartsCarryManifest(self.output_dir / 'bench', 'latency.csv')

    def test_entropy_chart_carries_the_manifest(self):
        self._call('entropy', fresh=True, probes=8, bins=4)
        self.assertChartsCarryManifest(self.output_dir / 'entropy', 'entropy.csv')

    def test_unstable_bench_still_writes_rows(self):
        with self.assertRaises(CommandError) as caught:
            self._call('bench', variants='lora', d=16, total_rank=4, reps=100, warmup=0, inner=1, max_cv=0)
        self.assertEqual(caught.exception.returncode, 1)
        self.assertTrue((self.output_dir / 'bench' / 'latency.csv').is_file())

    def test_bench_needs_the_lora_baseline(self):
        with self.assertRaises(CommandError) as caught:
            self._call('bench', variants='dual_lora', reps=100)
        self.assertEqual(caught.exception.returncode, 2)

    @skipUnless(settings.RUN_EXPERIMENTS, 'long experiment; set DUALLORA_RUN_EXPERIMENTS=true')
    def test_latency_ordering(self):
        output = self._call('bench', assert_ordering=True)
        self.assertIn('ordering holds', output)
