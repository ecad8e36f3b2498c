"""
Django management command to benchmark adapter forward latency against vanilla LoRA
Usage: python manage.py bench [--reps 1000] [--assert-ordering true]
"""

from apps.conflictbench.exceptions import UnstableMeasurement
from apps.conflictbench.latency import latency_bench, ordering_holds
from apps.experiments.command_base import ExperimentCommand
from apps.experiments.forms import BenchConfigForm
from apps.vce.params import VceConfig

ROW_COLUMNS = ['variant', 'median_s', 'mean_s', 'cv', 'ratio', 'param_count']


class Command(ExperimentCommand):
    help = 'Single-threaded median latency per adapter variant, normalised to vanilla LoRA'
    form_class = BenchConfigForm

    def _write(self, report, rows):
        path = report.csv('latency.csv', ROW_COLUMNS,
                          ([row.to_dict()[column] for column in ROW_COLUMNS] for row in rows))
        report.csv('samples.csv', ['variant', 'rep', 'seconds'],
                   ([row.variant, rep, value] for row in rows for rep, value in enumerate(row.samples)))
        report.bar_svg('latency.svg', path, 'variant', 'ratio', 'Inference time relative to LoRA', reference=1.0)
        report.finish()

    def handle(self, *args, **options):
        resolved = self.resolve(options)
        vce_config = VceConfig(
            levels=resolved['vce_levels'], heads=resolved['vce_heads'],
            points=resolved['vce_points'], channels=resolved['vce_channels'],
        )
        self.banner(f"Latency benchmark: d={resolved['d']}, total rank {resolved['total_rank']}, "
                    f"{resolved['reps']} reps")
        report = self.report_service(resolved, options)
        try:
            rows = latency_bench(
                resolved['variants'], d=resolved['d'], total_rank=resolved['total_rank'],
                reps=resolved['reps'], warmup=resolved['warmup'], tokens=resolved['tokens'],
                inner=resolved['inner'], seed=resolved['seed'], vce_config=vce_config,
                vce_grid=tuple(resolved['vce_grid']), max_cv=resolved['max_cv'],
            )
        except UnstableMeasurement as e:
            self._write(report, e.rows)
            self.fail(f"Unstable measurement: {e}")

        self._write(report, rows)
        for row in rows:
            self.stdout.write(f"  {row.variant:<16} {row.ratio:6.3f}×  median {row.median * 1e6:9.1f} µs  "
                              f"cv {row.cv:.3f}")

        if resolved['assert_ordering']:
            if not ordering_holds(rows):
                self.fail("Latency ordering violated: expected Dual-LoRA < MoE top-2 < MoE softmax "
                          "and Dual-LoRA < Dual-LoRA+VCE")
            self.stdout.write(self.style.SUCCESS('✓ Latency ordering holds'))
        self.stdout.write(self.style.SUCCESS(f'\n✓ Benchmark written to {report.directory}'))
