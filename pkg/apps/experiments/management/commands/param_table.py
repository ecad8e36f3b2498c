"""
Django management command to tabulate trainable parameter counts per adapter kind and rank
Usage: python manage.py param_table [--d-in 4096 --d-out 4096] [--ranks 32,64,128]
"""

from apps.conflictbench.experiment_service import param_table
from apps.experiments.command_base import ExperimentCommand
from apps.experiments.forms import ParamTableConfigForm
from apps.vce.params import VceConfig

KINDS = ('lora', 'dual_lora', 'moe')


class Command(ExperimentCommand):
    help = 'Closed-form parameter counts of LoRA, Dual-LoRA and LoRA-MoE, plus the VCE size'
    form_class = ParamTableConfigForm

    def handle(self, *args, **options):
        resolved = self.resolve(options)
        vce_config = None
        if resolved['include_vce']:
            vce_config = VceConfig(levels=resolved['vce_levels'], heads=resolved['vce_heads'],
                                   points=resolved['vce_points'], channels=resolved['vce_channels'])
        rows = param_table(resolved['d_in'], resolved['d_out'], resolved['ranks'], vce_config,
                           resolved['bytes_per_param'])

        report = self.report_service(resolved, options)
        columns = ['rank', *KINDS] + (['vce', 'vce_megabytes'] if vce_config else [])
        report.csv('param_table.csv', columns, ([row[column] for column in columns] for row in rows))
        bars = report.csv(
            'param_bars.csv', ['label', 'parameters'],
            ([f'{kind} r={row["rank"]}', row[kind]] for row in rows for kind in KINDS),
        )
        report.bar_svg('param_table.svg', bars, 'label', 'parameters', 'Trainable parameters per adapter')
        report.finish()

        self.banner(f"Parameter counts at d_in={resolved['d_in']}, d_out={resolved['d_out']}")
        for row in rows:
            self.stdout.write('  ' + '  '.join(f'{column}={row[column]}' for column in columns))
