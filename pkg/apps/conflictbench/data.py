"""
Synthetic multi-task regression data with tunable conflict between tasks
"""

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from apps.numeric.exceptions import ShapeError
from apps.numeric.rng import Rng

logger = logging.getLogger(__name__)


@dataclass
class SyntheticTaskSpec:
    """
    Per-task linear target maps M_t (output_dim×input_dim)

    With base map M and conflict c: M_0 = M, M_1 = (1 - c)·M - c·M, and any
    further task mixes M with its own random map N_t as (1 - c)·M + c·N_t.
    c = 0 gives identical tasks; c = 1 makes tasks 0 and 1 exact negations.
    """

    num_tasks: int
    input_dim: int
    output_dim: int
    conflict: float
    maps: np.ndarray
    task_encoding: str = 'embedding'

    @classmethod
    def create(cls, num_tasks: int = 2, input_dim: int = 8, output_dim: int = 4, conflict: float = 1.0,
               seed: int = 0) -> 'SyntheticTaskSpec':
        if num_tasks < 1:
            raise ShapeError(f"Need at least one task, got {num_tasks}")
        if not 0.0 <= conflict <= 1.0:
            raise ValueError(f"Conflict coefficient must lie in [0, 1], got {conflict}")
        rng = Rng(seed).child('task_maps')
        base = rng.child('base').normal((output_dim, input_dim), scale=1.0 / np.sqrt(input_dim))
        maps = []
        for task in range(num_tasks):
            if task == 0:
                own = base
            elif task == 1:
                own = -base
            else:
                own = rng.child('task', task).normal((output_dim, input_dim), scale=1.0 / np.sqrt(input_dim))
            maps.append((1.0 - conflict) * base + conflict * own)
        return cls(num_tasks, input_dim, output_dim, float(conflict), np.stack(maps))

    def to_dict(self) -> dict:
        return {
            'num_tasks': self.num_tasks,
            'input_dim': self.input_dim,
            'output_dim': self.output_dim,
            'conflict': self.conflict,
            'task_encoding': self.task_encoding,
        }


@dataclass
class ConflictDataset:
    task_ids: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray
    num_tasks: int

    def __len__(self) -> int:
        return len(self.task_ids)

    @property
    def labels(self) -> np.ndarray:
        """Class labels for the cross-entropy objective: argmax of each target"""
        return np.argmax(self.targets, axis=-1)

    def subset(self, index) -> 'ConflictDataset':
        return ConflictDataset(self.task_ids[index], self.inputs[index], self.targets[index], self.num_tasks)

    def split(self, eval_fraction: float = 0.25) -> tuple:
        """
        (train, eval) split on whole input groups

        Samples are laid out input-major, so cutting at a multiple of the task
        count keeps every held-out input unseen during training.
        """
        groups = len(self) // self.num_tasks
        eval_groups = max(1, int(round(groups * eval_fraction)))
        cut = (groups - eval_groups) * self.num_tasks
        return self.subset(slice(0, cut)), self.subset(slice(cut, len(self)))

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for array in (self.task_ids.astype(np.int64), self.inputs, self.targets):
            digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()

    def to_records(self) -> list:
        return [
            {'task': int(t), 'input': x.tolist(), 'target': y.tolist()}
            for t, x, y in zip(self.task_ids, self.inputs, self.targets)
        ]


def generate_conflict_dataset(spec: SyntheticTaskSpec, n: int, seed: int) -> ConflictDataset:
    """
    Draw ``n`` samples whose inputs are shared across tasks

    Each standard-normal input is paired with every task in turn, so under
    conflict 1 the same input appears with targets y and -y and only the task
    token tells them apart.
    """
    if n < spec.num_tasks:
        raise ValueError(f"Need at least one sample per task: n={n} < tasks={spec.num_tasks}")
    groups = -(-n // spec.num_tasks)
    base_inputs = Rng(seed).child('inputs').normal((groups, spec.input_dim))
    inputs = np.repeat(base_inputs, spec.num_tasks, axis=0)[:n]
    task_ids = np.tile(np.arange(spec.num_tasks), groups)[:n]
    targets = np.einsum('noi,ni->no', spec.maps[task_ids], inputs)
    logger.debug(f"Generated {n} samples for {spec.num_tasks} tasks at conflict {spec.conflict}")
    return ConflictDataset(task_ids=task_ids, inputs=inputs, targets=targets, num_tasks=spec.num_tasks)
