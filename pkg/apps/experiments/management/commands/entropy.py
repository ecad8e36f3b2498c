"""
Django management command to compare skill and rectified activation entropies per layer
Usage: python manage.py entropy [--checkpoint runs/train_conflict/dual_lora_seed0.dlra] [--fresh true]
"""

from pathlib import Path

from django.conf import settings

from apps.adapters.exceptions import CheckpointError
from apps.conflictbench.data import SyntheticTaskSpec, generate_conflict_dataset
from apps.conflictbench.entropy import entropy_analysis, mean_entropies
from apps.conflictbench.experiment_service import checkpoint_name
from apps.conflictbench.model import ToyModel, load_model
from apps.conflictbench.variants import build_variant
from apps.experiments.command_base import ExperimentCommand
from apps.experiments.forms import EntropyConfigForm


class Command(ExperimentCommand):
    help = 'Per-layer entropy of Norm(Sx) and its gated product over a probe set'
    form_class = EntropyConfigForm

    def _model(self, resolved: dict) -> ToyModel:
        seed = resolved['seed']
        if resolved['fresh']:
            model = ToyModel(backbone_seed=seed)
            variant = build_variant('dual_lora', settings.DUALLORA_DEFAULTS['total_rank'], model.config.d_model)
            return model.inject(variant, seed)
        path = Path(resolved['checkpoint'] or
                    Path(settings.OUTPUT_DIR) / 'train_conflict' / checkpoint_name('dual_lora', seed))
        try:
            model, _ = load_model(path)
        except CheckpointError as e:
            self.fail(f"Cannot load checkpoint: {e}")
        self.stdout.write(f'  Loaded {path}')
        return model

    def handle(self, *args, **options):
        resolved = self.resolve(options)
        model = self._model(resolved)
        config = model.config
        spec = SyntheticTaskSpec.create(num_tasks=config.num_tasks, input_dim=config.input_dim,
                                        output_dim=config.output_dim, conflict=resolved['conflict'],
                                        seed=resolved['seed'])
        probes = generate_conflict_dataset(spec, max(resolved['probes'], config.num_tasks), resolved['seed'])

        self.banner(f"Entropy analysis over {len(probes)} probes, {resolved['bins']} bins")
        try:
            layers = entropy_analysis(model, probes.task_ids, probes.inputs, resolved['bins'])
        except ValueError as e:
            self.fail(str(e))

        report = self.report_service(resolved, options)
        curves = report.csv(
            'entropy.csv', ['index', 'layer', 'h_skill', 'h_rectified'],
            ([index, layer.layer, repr(layer.h_skill), repr(layer.h_rectified)] for index, layer in enumerate(layers)),
        )
        report.csv(
            'histograms.csv', ['layer', 'space', 'bin', 'left_edge', 'count'],
            ([layer.layer, space, b, repr(float(histogram.edges[b])), int(histogram.counts[b])]
             for layer in layers
             for space, histogram in (('skill', layer.skill), ('rectified', layer.rectified))
             for b in range(len(histogram.counts))),
        )
        report.line_svg('entropy.svg', curves, 'index', ['h_skill', 'h_rectified'], 'Activation entropy per layer')
        report.finish()

        h_skill, h_rectified = mean_entropies(layers)
        for layer in layers:
            self.stdout.write(f'  {layer.layer:<10} H_skill {layer.h_skill:.4f}  H_rectified {layer.h_rectified:.4f}')
        self.stdout.write(f'  Mean H_skill {h_skill:.4f}, mean H_rectified {h_rectified:.4f}')
        if resolved['fresh']:
            return
        if h_rectified < h_skill:
            self.stdout.write(self.style.SUCCESS('✓ Rectified skill space has lower entropy'))
        else:
            self.stdout.write(self.style.WARNING('✗ Rectified skill space does not have lower entropy'))
