"""
Histogram entropy of Dual-LoRA skill and rectified activations
"""

import logging
from dataclasses import dataclass

import numpy as np

from .data import ConflictDataset
from .model import ToyModel
from .training import predict

logger = logging.getLogger(__name__)

DEFAULT_BINS = 64


@dataclass
class ActivationHistogram:
    counts: np.ndarray
    edges: np.ndarray
    entropy: float


@dataclass
class LayerEntropy:
    layer: str
    skill: ActivationHistogram
    rectified: ActivationHistogram

    @property
    def h_skill(self) -> float:
        return self.skill.entropy

    @property
    def h_rectified(self) -> float:
        return self.rectified.entropy

    def to_dict(self) -> dict:
        return {'layer': self.layer, 'h_skill': self.h_skill, 'h_rectified': self.h_rectified}


def histogram_entropy(values, bins: int = DEFAULT_BINS) -> ActivationHistogram:
    """
    Shannon entropy (nats) of a fixed-bin histogram over the min-max range of ``values``

    A zero-width range puts everything in one bin and has entropy 0.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("Cannot build a histogram of no values")
    low, high = float(values.min()), float(values.max())
    if high == low:
        counts = np.zeros(bins, dtype=np.int64)
        counts[0] = values.size
        return ActivationHistogram(counts, np.linspace(low, low, bins + 1), 0.0)
    counts, edges = np.histogram(values, bins=bins, range=(low, high))
    probabilities = counts[counts > 0] / values.size
    return ActivationHistogram(counts, edges, float(-np.sum(probabilities * np.log(probabilities))))


def collect_activations(model: ToyModel, task_ids: np.ndarray, inputs: np.ndarray) -> dict:
    """Pooled (skill, rectified) activation arrays per Dual-LoRA slot over the probe set"""
    pools = {}

    def observe(slot, activations):
        skill, rectified = pools.setdefault(slot, ([], []))
        skill.append(activations.skill.data.ravel())
        rectified.append(activations.rectified.data.ravel())

    probes = ConflictDataset(
        task_ids=np.asarray(task_ids), inputs=np.asarray(inputs, dtype=np.float64),
        targets=np.zeros((len(task_ids), model.config.output_dim)), num_tasks=model.config.num_tasks,
    )
    predict(model, probes, observer=observe)
    return {slot: (np.concatenate(skill), np.concatenate(rectified)) for slot, (skill, rectified) in pools.items()}


def entropy_analysis(model: ToyModel, task_ids: np.ndarray, inputs: np.ndarray,
                     bins: int = DEFAULT_BINS) -> list:
    """
    Per-layer entropy of Norm(Sx) and Norm(Sx) ⊙ ReLU(Tx) over a probe set

    Returns:
        LayerEntropy for every Dual-LoRA slot, in slot order

    Raises:
        ValueError: empty probe set, or a model without Dual-LoRA slots
    """
    if len(task_ids) == 0:
        raise ValueError("entropy_analysis needs at least one probe")
    pools = collect_activations(model, task_ids, inputs)
    if not pools:
        raise ValueError("The model has no Dual-LoRA slots to analyse")
    layers = [
        LayerEntropy(slot, histogram_entropy(skill, bins), histogram_entropy(rectified, bins))
        for slot, (skill, rectified) in sorted(pools.items())
    ]
    for layer in layers:
        logger.debug(f"{layer.layer}: H_skill {layer.h_skill:.4f}, H_rectified {layer.h_rectified:.4f}")
    return layers


def mean_entropies(layers: list) -> tuple:
    """(mean H_skill, mean H_rectified) across layers"""
    return (float(np.mean([layer.h_skill for layer in layers])),
            float(np.mean([layer.h_rectified for layer in layers])))
