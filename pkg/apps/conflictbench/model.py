"""
Toy multimodal transformer with adapter slots on the query and value projections

A sample is a task id plus an input vector. A frozen random "vision encoder"
lifts the input into L feature maps on an H×W grid; the optional VCE front-end
enhances the last map; a trainable projector maps each grid token to d_model.
The sequence is [task token] + H·W visual tokens, processed by residual
single-head attention/MLP blocks. The frozen output head reads position 0.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from apps.adapters.exceptions import CheckpointError
from apps.adapters.layers import adapter_forward, frozen_forward
from apps.adapters.params import FrozenLinear
from apps.adapters.serialization import (
    adapter_metadata, adapter_tensors, build_adapter, load_tensors, save_tensors,
)
from apps.numeric import ops
from apps.numeric.rng import Rng
from apps.numeric.tensor import Tensor
from apps.vce.attention import vce_forward
from apps.vce.params import VceConfig, init_vce
from apps.vce.pyramid import FeaturePyramid

from .variants import Variant

logger = logging.getLogger(__name__)

ADAPTER_SITES = ('q', 'v')


@dataclass(frozen=True)
class ToyConfig:
    input_dim: int = 8
    output_dim: int = 4
    num_tasks: int = 2
    d_model: int = 64
    blocks: int = 2
    grid: tuple = (3, 5)
    token_channels: int = 8
    mlp_ratio: int = 2
    vce_levels: int = 4
    vce_heads: int = 2
    vce_points: int = 4
    gamma: float = 1.0

    @property
    def seq_len(self) -> int:
        return 1 + self.grid[0] * self.grid[1]

    @property
    def vce_config(self) -> VceConfig:
        return VceConfig(levels=self.vce_levels, heads=self.vce_heads, points=self.vce_points,
                         channels=self.token_channels, gamma=self.gamma)

    def to_dict(self) -> dict:
        record = asdict(self)
        record['grid'] = list(self.grid)
        return record

    @classmethod
    def from_dict(cls, record: dict) -> 'ToyConfig':
        record = dict(record)
        record['grid'] = tuple(record['grid'])
        return cls(**record)


@dataclass
class ToyBlock:
    query: FrozenLinear
    key: FrozenLinear
    value: FrozenLinear
    output: FrozenLinear
    mlp_in: FrozenLinear
    mlp_out: FrozenLinear
    adapters: dict = field(default_factory=lambda: {site: None for site in ADAPTER_SITES})

    def frozen(self) -> dict:
        return {name: getattr(self, name).weight for name in ('query', 'key', 'value', 'output', 'mlp_in', 'mlp_out')}


def _frozen(weight: np.ndarray) -> FrozenLinear:
    return FrozenLinear.from_array(weight)


def _fan_in(rng: Rng, shape: tuple, gain: float = 1.0) -> np.ndarray:
    bound = gain / math.sqrt(shape[1])
    return rng.uniform(-bound, bound, shape)


class ToyModel:
    """
    Fixed random backbone plus the trainable projector, optional VCE and adapters

    The backbone is drawn from ``backbone_seed`` with orthogonal attention
    projections and fan-in uniform MLP weights; it never changes afterwards.
    """

    def __init__(self, config: ToyConfig = ToyConfig(), backbone_seed: int = 0, use_vce: bool = False,
                 vce_seed: int = 0):
        self.config = config
        self.backbone_seed = backbone_seed
        rng = Rng(backbone_seed).child('backbone')
        d, c = config.d_model, config.token_channels
        tokens = config.grid[0] * config.grid[1]

        self.lifts = [
            Tensor(rng.child('lift', level).normal((tokens * c, config.input_dim), scale=1.0 / math.sqrt(config.input_dim)),
                   name=f'lift{level}')
            for level in range(config.vce_levels)
        ]
        self.task_embedding = Tensor(rng.child('tasks').normal((config.num_tasks, d), scale=1.0 / math.sqrt(d)),
                                     name='task_embedding')
        self.positions = Tensor(rng.child('positions').normal((config.seq_len, d), scale=0.1 / math.sqrt(d)),
                                name='positions')
        self.blocks = []
        for index in range(config.blocks):
            block_rng = rng.child('block', index)
            hidden = config.mlp_ratio * d
            self.blocks.append(ToyBlock(
                query=_frozen(block_rng.child('q').orthogonal(d)),
                key=_frozen(block_rng.child('k').orthogonal(d)),
                value=_frozen(block_rng.child('v').orthogonal(d)),
                output=_frozen(0.5 * block_rng.child('o').orthogonal(d)),
                mlp_in=_frozen(_fan_in(block_rng.child('mlp_in'), (hidden, d))),
                mlp_out=_frozen(_fan_in(block_rng.child('mlp_out'), (d, hidden), gain=0.5)),
            ))
        self.head = _frozen(rng.child('head').orthogonal(d)[:config.output_dim])
        self.projector = Tensor(_fan_in(Rng(backbone_seed).child('projector'), (d, c)),
                                requires_grad=True, name='projector')
        self.vce = init_vce(config.vce_config, Rng(vce_seed).child('vce')) if use_vce else None

    # -- parameter groups -------------------------------------------------

    def inject(self, variant: Variant, seed: int) -> 'ToyModel':
        """Fresh adapters of the variant's spec in every q/v slot; seeds differ per slot"""
        for index, block in enumerate(self.blocks):
            for site_index, site in enumerate(ADAPTER_SITES):
                slot_seed = (seed << 8) | (index << 1) | site_index
                block.adapters[site] = (
                    variant.adapter.build(self.config.d_model, self.config.d_model, slot_seed)
                    if variant.adapter is not None else None
                )
        return self

    def adapter_slots(self) -> dict:
        return {
            f'block{index}.{site}': adapter
            for index, block in enumerate(self.blocks)
            for site, adapter in block.adapters.items()
            if adapter is not None
        }

    def adapter_parameters(self) -> dict:
        return {
            f'{slot}.{name}': tensor
            for slot, adapter in self.adapter_slots().items()
            for name, tensor in adapter.trainable().items()
        }

    def vce_parameters(self) -> dict:
        if self.vce is None:
            return {}
        return {f'vce.{name}': tensor for name, tensor in self.vce.trainable().items()}

    def frozen_parameters(self) -> dict:
        tensors = {f'lift{i}': lift for i, lift in enumerate(self.lifts)}
        tensors.update(task_embedding=self.task_embedding, positions=self.positions, head=self.head.weight)
        for index, block in enumerate(self.blocks):
            tensors.update({f'block{index}.{name}': weight for name, weight in block.frozen().items()})
        return tensors

    # -- forward ----------------------------------------------------------

    def visual_tokens(self, inputs: np.ndarray) -> Tensor:
        """(B, H·W, C) grid tokens, VCE-enhanced when the front-end is present"""
        height, width = self.config.grid
        channels = self.config.token_channels
        batch = inputs.shape[0]
        if self.vce is None:
            anchor = inputs @ self.lifts[-1].data.T
            return Tensor(anchor.reshape(batch, height * width, channels))

        enhanced = []
        for sample in inputs:
            levels = [Tensor((lift.data @ sample).reshape(height, width, channels)) for lift in self.lifts]
            fused, _ = vce_forward(FeaturePyramid(levels), self.vce)
            enhanced.append(ops.reshape(fused, (height * width, channels)))
        return ops.stack(enhanced, axis=0)

    def _block_forward(self, block: ToyBlock, h: Tensor, name: str, training: bool, rng: Optional[Rng],
                       observer: Optional[Callable]) -> Tensor:
        def watch(site):
            if observer is None:
                return None
            return lambda activations: observer(f'{name}.{site}', activations)

        q_rng = rng.child(name, 'q') if rng is not None else None
        v_rng = rng.child(name, 'v') if rng is not None else None
        q = adapter_forward(block.query, block.adapters['q'], h, training, q_rng, watch('q'))
        k = frozen_forward(block.key, h)
        v = adapter_forward(block.value, block.adapters['v'], h, training, v_rng, watch('v'))

        scores = ops.scale(ops.matmul(q, ops.transpose(k)), 1.0 / math.sqrt(self.config.d_model))
        context = ops.matmul(ops.softmax(scores, axis=-1), v)
        h = ops.add(h, frozen_forward(block.output, context))
        hidden = ops.relu(frozen_forward(block.mlp_in, h))
        return ops.add(h, frozen_forward(block.mlp_out, hidden))

    def forward(self, task_ids: np.ndarray, inputs: np.ndarray, training: bool = False,
                rng: Optional[Rng] = None, observer: Optional[Callable] = None) -> Tensor:
        """
        Outputs (B, output_dim) for a batch

        Args:
            observer: Called as observer(slot_name, DualActivations) by every Dual-LoRA slot
        """
        task_ids = np.asarray(task_ids, dtype=np.intp)
        inputs = np.asarray(inputs, dtype=np.float64)
        batch = inputs.shape[0]
        visual = ops.matmul(self.visual_tokens(inputs), ops.transpose(self.projector))
        task_tokens = Tensor(self.task_embedding.data[task_ids].reshape(batch, 1, self.config.d_model))
        h = ops.add(ops.concat([task_tokens, visual], axis=1), self.positions)
        for index, block in enumerate(self.blocks):
            h = self._block_forward(block, h, f'block{index}', training, rng, observer)
        return frozen_forward(self.head, ops.getitem(h, (slice(None), 0)))


def save_model(path, model: ToyModel, extra: Optional[dict] = None):
    """Binary checkpoint of the trainable state; the backbone is rebuilt from its seed"""
    tensors = {'projector': model.projector}
    slots = {}
    for slot, adapter in model.adapter_slots().items():
        slots[slot] = adapter_metadata(adapter)
        tensors.update({f'{slot}.{name}': tensor for name, tensor in adapter_tensors(adapter).items()})
    tensors.update(model.vce_parameters())
    metadata = {
        'config': model.config.to_dict(),
        'backbone_seed': model.backbone_seed,
        'use_vce': model.vce is not None,
        'adapters': slots,
        **(extra or {}),
    }
    return save_tensors(path, tensors, metadata)


def load_model(path) -> tuple:
    """
    Rebuild a ToyModel from ``save_model`` output

    Returns:
        (ToyModel, metadata)

    Raises:
        CheckpointError: missing or malformed checkpoint
    """
    tensors, metadata = load_tensors(path)
    try:
        model = ToyModel(ToyConfig.from_dict(metadata['config']), metadata['backbone_seed'], metadata['use_vce'])
        model.projector.assign(tensors['projector'])
        for slot, adapter_meta in metadata['adapters'].items():
            index, site = slot.split('.')
            model.blocks[int(index[len('block'):])].adapters[site] = build_adapter(adapter_meta, tensors, f'{slot}.')
        for name, tensor in model.vce_parameters().items():
            tensor.assign(tensors[name])
    except CheckpointError:
        raise
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path} does not describe a toy model: {exc!r}") from exc
    logger.info(f"Loaded toy model with {len(metadata['adapters'])} adapter slots from {path}")
    return model, metadata
