"""
Django management command to train adapter variants on synthetic conflicting tasks
Usage: python manage.py train_conflict [--variants lora,dual_lora] [--seeds 0,1,2,3,4] [--conflict 1.0]
"""

from apps.conflictbench.experiment_service import ConflictExperimentService, checkpoint_name
from apps.conflictbench.model import ToyConfig
from apps.conflictbench.training import TrainConfig
from apps.experiments.command_base import ExperimentCommand
from apps.experiments.forms import TrainConflictConfigForm


class Command(ExperimentCommand):
    help = 'Two-stage training of adapter variants on the same conflict dataset and seeds'
    form_class = TrainConflictConfigForm

    def handle(self, *args, **options):
        resolved = self.resolve(options)
        toy_config = ToyConfig(num_tasks=resolved['num_tasks'], d_model=resolved['d_model'],
                               blocks=resolved['blocks'])
        train_config = TrainConfig(
            stage1_steps=resolved['stage1_steps'],
            stage2_steps=resolved['stage2_steps'],
            lr=resolved['lr'],
            batch_size=resolved['batch_size'],
            rank=resolved['total_rank'],
            alpha=resolved['alpha'],
            dropout=resolved['dropout'],
            matching=resolved['matching'],
            scale_rule=resolved['scale_rule'],
            objective=resolved['objective'],
            stage2_train_projector=resolved['stage2_train_projector'],
            log_every=resolved['log_every'],
        )
        task = {'conflict': resolved['conflict'], 'eval_fraction': resolved['eval_fraction']}
        variants, seeds = resolved['variants'], resolved['seeds']

        self.banner(f"Conflict training: {', '.join(variants)} on seeds {seeds}, conflict {resolved['conflict']}")
        report = self.report_service(resolved, options)
        service = ConflictExperimentService(toy_config, workers=resolved['workers'])
        stats = service.run(
            variants, seeds, train_config, task, samples=resolved['samples'],
            checkpoint_dir=report.directory if resolved['save_checkpoints'] else None,
        )
        reports = stats['reports']

        report.jsonl('metrics.jsonl', [record for r in reports for record in r.to_records()])
        curves = report.csv(
            'loss_curves.csv', ['series', 'variant', 'seed', 'step', 'stage', 'loss'],
            ([f'{r.variant}/seed{r.seed}', r.variant, r.seed, step, stage, repr(loss)]
             for r in reports for step, stage, loss in zip(r.steps, r.stages, r.losses)),
        )
        num_tasks = toy_config.num_tasks
        report.csv(
            'summary.csv',
            ['variant', 'seed', 'final_loss', 'eval_loss'] + [f'eval_task{t}' for t in range(num_tasks)]
            + ['adapter_params', 'h_skill', 'h_rectified', 'diverged', 'diagnostic'],
            ([r.variant, r.seed, repr(r.final_loss), repr(r.eval_loss)]
             + [repr(v) for v in (r.eval_task_losses or [float('nan')] * num_tasks)]
             + [r.param_counts.get('adapters', 0), repr(r.entropy.get('h_skill', float('nan'))),
                repr(r.entropy.get('h_rectified', float('nan'))), r.diverged, r.diagnostic]
             for r in reports),
        )
        report.csv('medians.csv', ['variant', 'median_eval_loss'],
                   ([name, repr(value)] for name, value in stats['medians'].items()))
        report.line_svg('loss_curves.svg', curves, 'step', ['loss'], 'Monitor loss per variant and seed',
                        series_column='series', log_y=True)
        if resolved['save_checkpoints']:
            for r in reports:
                if not r.diverged:
                    report.register(report.path(checkpoint_name(r.variant, r.seed)))
        report.finish()

        self.stdout.write(self.style.SUCCESS('\n✓ Training completed:'))
        for name, median in stats['medians'].items():
            self.stdout.write(f'  {name:<24} median eval loss {median:.6f}')
        if 'dual_lora' in variants and 'lora' in variants:
            won, compared = ConflictExperimentService.wins(reports, 'dual_lora', 'lora')
            self.stdout.write(f'  Dual-LoRA beats LoRA on {won} of {compared} seeds')

        if stats['failed']:
            diagnostics = '; '.join(f'{r.variant}/seed{r.seed}: {r.diagnostic}' for r in reports if r.diverged)
            self.fail(f"{stats['failed']} training run(s) diverged: {diagnostics}")
