"""
Two-stage SGD training and side-effect free evaluation of the toy model

Stage 1 updates only the VCE front-end and the projector. Stage 2 adds the
injected adapters (and keeps or freezes the projector). Both stages minimise
MSE against regression targets, or cross-entropy against argmax labels.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from apps.adapters.params import ScaleRule
from apps.numeric import ops
from apps.numeric.optim import sgd_step
from apps.numeric.rng import Rng
from apps.numeric.tensor import Tape

from .data import ConflictDataset
from .exceptions import TrainingDiverged
from .model import ToyModel
from .variants import Matching, Variant, build_variant

logger = logging.getLogger(__name__)


class Objective:
    MSE = 'mse'
    CROSS_ENTROPY = 'cross_entropy'
    CHOICES = (MSE, CROSS_ENTROPY)


@dataclass(frozen=True)
class TrainConfig:
    stage1_steps: int = 200
    stage2_steps: int = 2000
    lr: float = 0.05
    batch_size: int = 16
    seed: int = 0
    variant: str = 'dual_lora'
    rank: int = 64
    alpha: Optional[float] = None
    dropout: float = 0.0
    matching: str = Matching.RANK
    scale_rule: str = ScaleRule.R_OVER_ALPHA.value
    objective: str = Objective.MSE
    stage2_train_projector: bool = True
    log_every: int = 50
    monitor_size: int = 64

    def __post_init__(self):
        if self.objective not in Objective.CHOICES:
            raise ValueError(f"objective must be one of {Objective.CHOICES}, got '{self.objective}'")
        if self.batch_size < 1 or self.log_every < 1:
            raise ValueError("batch_size and log_every must be positive")

    def build_variant(self, d_model: int) -> Variant:
        return build_variant(self.variant, self.rank, d_model, self.matching, self.alpha, self.dropout,
                             ScaleRule(self.scale_rule))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsReport:
    variant: str
    seed: int
    steps: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    task_losses: list = field(default_factory=list)
    gate_liveness: list = field(default_factory=list)
    eval_task_losses: list = field(default_factory=list)
    entropy: dict = field(default_factory=dict)
    param_counts: dict = field(default_factory=dict)
    diverged: bool = False
    diagnostic: str = ''

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float('nan')

    @property
    def eval_loss(self) -> float:
        return float(np.mean(self.eval_task_losses)) if self.eval_task_losses else float('nan')

    def to_records(self) -> list:
        """One JSON-ready record per logged step"""
        return [
            {
                'variant': self.variant,
                'seed': self.seed,
                'step': step,
                'stage': stage,
                'loss': loss,
                'task_losses': tasks,
                'gate_liveness': liveness,
            }
            for step, stage, loss, tasks, liveness in zip(
                self.steps, self.stages, self.losses, self.task_losses, self.gate_liveness
            )
        ]

    def summary(self) -> dict:
        return {
            'variant': self.variant,
            'seed': self.seed,
            'final_loss': self.final_loss,
            'eval_loss': self.eval_loss,
            'eval_task_losses': self.eval_task_losses,
            'param_counts': self.param_counts,
            'diverged': self.diverged,
            'diagnostic': self.diagnostic,
        }


def per_sample_losses(predictions: np.ndarray, dataset: ConflictDataset, objective: str) -> np.ndarray:
    if objective == Objective.CROSS_ENTROPY:
        shifted = predictions - predictions.max(axis=-1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        return -log_probs[np.arange(len(dataset)), dataset.labels]
    return np.mean((predictions - dataset.targets) ** 2, axis=-1)


def per_task_means(losses: np.ndarray, task_ids: np.ndarray, num_tasks: int) -> list:
    return [float(losses[task_ids == task].mean()) if np.any(task_ids == task) else float('nan')
            for task in range(num_tasks)]


def predict(model: ToyModel, dataset: ConflictDataset, batch_size: int = 64, observer=None) -> np.ndarray:
    """Eval-mode outputs for every sample; no tape, no parameter access beyond reads"""
    outputs = [
        model.forward(dataset.task_ids[start:start + batch_size], dataset.inputs[start:start + batch_size],
                      observer=observer).data
        for start in range(0, len(dataset), batch_size)
    ]
    return np.concatenate(outputs, axis=0)


def evaluate(model: ToyModel, dataset: ConflictDataset, objective: str = Objective.MSE) -> np.ndarray:
    """Mean loss per task over ``dataset``"""
    losses = per_sample_losses(predict(model, dataset), dataset, objective)
    return np.array(per_task_means(losses, dataset.task_ids, dataset.num_tasks))


def _batch_loss(model: ToyModel, batch: ConflictDataset, objective: str, rng: Rng):
    outputs = model.forward(batch.task_ids, batch.inputs, training=True, rng=rng)
    if objective == Objective.CROSS_ENTROPY:
        return ops.cross_entropy(outputs, batch.labels)
    return ops.mse_loss(outputs, batch.targets)


def _monitor(model: ToyModel, monitor: ConflictDataset, objective: str) -> tuple:
    liveness = []

    def observe(_slot, activations):
        liveness.append(activations.gate_liveness())

    losses = per_sample_losses(predict(model, monitor, observer=observe), monitor, objective)
    gate = float(np.mean(liveness)) if liveness else None
    return float(losses.mean()), per_task_means(losses, monitor.task_ids, monitor.num_tasks), gate


def stage_parameters(model: ToyModel, stage: int, train_projector: bool = True) -> dict:
    """Tensors updated in a stage: VCE and projector, plus the adapters in stage 2"""
    tensors = dict(model.vce_parameters())
    if stage == 1 or train_projector:
        tensors['projector'] = model.projector
    if stage == 2:
        tensors.update(model.adapter_parameters())
    return tensors


def train(model: ToyModel, config: TrainConfig, dataset: ConflictDataset,
          eval_dataset: Optional[ConflictDataset] = None) -> MetricsReport:
    """
    Run both stages and record monitor losses every ``log_every`` steps

    Raises:
        TrainingDiverged: a training loss became non-finite; the partial report is attached
    """
    rng = Rng(config.seed).child('train')
    report = MetricsReport(variant=config.variant, seed=config.seed)
    monitor = dataset.subset(slice(0, min(config.monitor_size, len(dataset))))
    everything = {**stage_parameters(model, 2), 'projector': model.projector}
    global_step = 0

    for stage, steps in ((1, config.stage1_steps), (2, config.stage2_steps)):
        active = stage_parameters(model, stage, config.stage2_train_projector)
        active_ids = {id(tensor) for tensor in active.values()}
        for tensor in everything.values():
            tensor.requires_grad = id(tensor) in active_ids
            tensor.zero_grad()
        logger.info(f"[{config.variant} seed {config.seed}] stage {stage}: {steps} steps over {len(active)} tensors")

        for step in range(steps):
            if step % config.log_every == 0:
                _record(report, model, monitor, config.objective, global_step, stage)
            indices = rng.child('batch', global_step).integers(0, len(dataset), config.batch_size)
            with Tape() as tape:
                loss = _batch_loss(model, dataset.subset(indices), config.objective,
                                   rng.child('dropout', global_step))
            value = loss.item()
            if not np.isfinite(value):
                report.diverged = True
                report.diagnostic = f"non-finite loss {value} at step {global_step} (stage {stage})"
                logger.error(f"[{config.variant} seed {config.seed}] {report.diagnostic}")
                raise TrainingDiverged(report.diagnostic, report)
            tape.backward(loss)
            sgd_step(active.values(), config.lr)
            global_step += 1

    _record(report, model, monitor, config.objective, global_step, 2)
    if eval_dataset is not None:
        report.eval_task_losses = evaluate(model, eval_dataset, config.objective).tolist()
    logger.info(
        f"[{config.variant} seed {config.seed}] done: monitor loss {report.final_loss:.6f}, eval loss {report.eval_loss:.6f}"
    )
    return report


def _record(report: MetricsReport, model: ToyModel, monitor: ConflictDataset, objective: str,
            step: int, stage: int) -> None:
    loss, tasks, liveness = _monitor(model, monitor, objective)
    if not np.isfinite(loss):
        report.diverged = True
        report.diagnostic = f"non-finite monitor loss at step {step} (stage {stage})"
        raise TrainingDiverged(report.diagnostic, report)
    report.steps.append(step)
    report.stages.append(stage)
    report.losses.append(loss)
    report.task_losses.append(tasks)
    report.gate_liveness.append(liveness)
    if liveness is not None:
        logger.debug(f"step {step}: loss {loss:.6f}, gate liveness {liveness:.3f}")
