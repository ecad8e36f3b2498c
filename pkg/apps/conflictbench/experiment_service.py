"""
Conflict Experiment Service
Runs two-stage trainings of adapter variants on shared conflict datasets,
optionally spread over a process pool, and collects their metrics reports.
"""
import logging
import multiprocessing as mp
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from apps.adapters.accounting import closed_form_param_count
from apps.adapters.params import AdapterKind
from apps.vce.params import VceConfig, count_vce_params

from .data import SyntheticTaskSpec, generate_conflict_dataset
from .entropy import entropy_analysis, mean_entropies
from .exceptions import TrainingDiverged
from .model import ToyConfig, ToyModel, save_model
from .training import MetricsReport, TrainConfig, evaluate, train

logger = logging.getLogger(__name__)

RANK_SWEEP = (32, 64, 128)


def checkpoint_name(variant: str, seed: int) -> str:
    return f'{variant}_seed{seed}.dlra'


def _run_job(job: dict) -> MetricsReport:
    """Pool entry point; rebuilds everything from plain arguments"""
    service = ConflictExperimentService(job['toy_config'])
    report, model = service.run_variant(job['variant'], job['train_config'], job['task'], job['samples'],
                                        keep_model=True)
    if job.get('checkpoint_dir') and not report.diverged:
        path = Path(job['checkpoint_dir']) / checkpoint_name(report.variant, report.seed)
        save_model(path, model, extra={'variant': report.variant, 'seed': report.seed})
    return report


class ConflictExperimentService:
    """Service to train and compare adapter variants on synthetic conflicting tasks"""

    def __init__(self, toy_config: ToyConfig = ToyConfig(), workers: int = 1):
        self.toy_config = toy_config
        self.workers = max(1, int(workers))

    def build_datasets(self, task: dict, samples: int, seed: int) -> tuple:
        """(spec, train split, eval split) for one seed; inputs and maps depend only on the seed"""
        spec = SyntheticTaskSpec.create(
            num_tasks=self.toy_config.num_tasks,
            input_dim=self.toy_config.input_dim,
            output_dim=self.toy_config.output_dim,
            conflict=task.get('conflict', 1.0),
            seed=seed,
        )
        dataset = generate_conflict_dataset(spec, samples, seed)
        train_set, eval_set = dataset.split(task.get('eval_fraction', 0.25))
        return spec, train_set, eval_set

    def build_model(self, variant_name: str, train_config: TrainConfig) -> ToyModel:
        variant = replace(train_config, variant=variant_name).build_variant(self.toy_config.d_model)
        model = ToyModel(self.toy_config, backbone_seed=train_config.seed, use_vce=variant.use_vce,
                         vce_seed=train_config.seed)
        return model.inject(variant, train_config.seed)

    def run_variant(self, variant_name: str, train_config: TrainConfig, task: dict, samples: int,
                    keep_model: bool = False):
        """
        Train one variant; divergence is logged and returned as a failed report

        Returns:
            MetricsReport, or (MetricsReport, ToyModel) when ``keep_model`` is set
        """
        config = replace(train_config, variant=variant_name)
        _, train_set, eval_set = self.build_datasets(task, samples, config.seed)
        model = self.build_model(variant_name, config)
        try:
            report = train(model, config, train_set, eval_set)
        except TrainingDiverged as e:
            logger.error(f"Variant {variant_name} seed {config.seed} diverged: {e}")
            report = e.report
        report.param_counts = {
            'adapters': int(sum(t.size for t in model.adapter_parameters().values())),
            'vce': int(sum(t.size for t in model.vce_parameters().values())),
            'projector': int(model.projector.size),
        }
        if not report.diverged and any(
            getattr(adapter, 'kind', None) is AdapterKind.DUAL_LORA for adapter in model.adapter_slots().values()
        ):
            h_skill, h_rectified = mean_entropies(entropy_analysis(model, eval_set.task_ids, eval_set.inputs))
            report.entropy = {'h_skill': h_skill, 'h_rectified': h_rectified}
        return (report, model) if keep_model else report

    def run(self, variants: Sequence[str], seeds: Sequence[int], train_config: TrainConfig, task: dict,
            samples: int = 512, checkpoint_dir: Optional[Path] = None) -> dict:
        """
        Every variant on every seed; reports are merged in (seed, variant) order

        With ``checkpoint_dir`` each finished model is saved there under ``checkpoint_name``.

        Returns:
            Stats dictionary with the reports, per-variant medians and the failure count
        """
        jobs = [
            {'toy_config': self.toy_config, 'variant': name, 'train_config': replace(train_config, seed=seed),
             'task': task, 'samples': samples, 'checkpoint_dir': checkpoint_dir}
            for seed in seeds for name in variants
        ]
        logger.info(f"Running {len(jobs)} trainings on {self.workers} worker(s)")
        if self.workers > 1:
            with mp.Pool(self.workers) as pool:
                reports = pool.map(_run_job, jobs)
        else:
            reports = [_run_job(job) for job in jobs]

        stats = {'reports': reports, 'failed': sum(r.diverged for r in reports), 'medians': {}}
        for name in variants:
            finished = [r.eval_loss for r in reports if r.variant == name and not r.diverged]
            stats['medians'][name] = float(np.median(finished)) if finished else float('nan')
        return stats

    @staticmethod
    def wins(reports: Sequence[MetricsReport], challenger: str, baseline: str) -> tuple:
        """(seeds where challenger's eval loss beats baseline's, seeds compared)"""
        by_seed = {}
        for report in reports:
            by_seed.setdefault(report.seed, {})[report.variant] = report
        compared = [pair for pair in by_seed.values() if challenger in pair and baseline in pair]
        won = sum(pair[challenger].eval_loss < pair[baseline].eval_loss for pair in compared)
        return won, len(compared)

    def baseline_eval(self, train_config: TrainConfig, task: dict, samples: int) -> np.ndarray:
        """Per-task eval loss of the untrained model (zero-initialised adapters)"""
        _, _, eval_set = self.build_datasets(task, samples, train_config.seed)
        return evaluate(self.build_model(train_config.variant, train_config), eval_set, train_config.objective)


def param_table(d_in: int, d_out: int, ranks: Sequence[int] = RANK_SWEEP,
                vce_config: Optional[VceConfig] = None, bytes_per_param: int = 2) -> list:
    """
    Closed-form trainable parameter counts per adapter kind and rank

    MoE rows split each rank over four equal experts.
    """
    rows = []
    for rank in ranks:
        experts = [rank // 4] * 4
        rows.append({
            'rank': rank,
            'lora': closed_form_param_count(AdapterKind.LORA, d_in, d_out, rank),
            'dual_lora': closed_form_param_count(AdapterKind.DUAL_LORA, d_in, d_out, rank),
            'moe': closed_form_param_count(AdapterKind.MOE, d_in, d_out, experts),
        })
    if vce_config is not None:
        size = count_vce_params(vce_config, bytes_per_param)
        for row in rows:
            row['vce'] = size.parameters
            row['vce_megabytes'] = size.megabytes
    return rows
