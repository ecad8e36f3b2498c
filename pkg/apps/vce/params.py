"""
VCE parameters, initialisation and size accounting
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from apps.numeric.exceptions import ShapeError
from apps.numeric.ops import DEFAULT_EPS
from apps.numeric.rng import Rng
from apps.numeric.tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_LEVELS = 4
DEFAULT_HEADS = 2
DEFAULT_POINTS = 4
DEFAULT_CHANNELS = 32
DEFAULT_GAMMA = 1.0
HALF_PRECISION_BYTES = 2


@dataclass(frozen=True)
class VceConfig:
    levels: int = DEFAULT_LEVELS
    heads: int = DEFAULT_HEADS
    points: int = DEFAULT_POINTS
    channels: int = DEFAULT_CHANNELS
    gamma: float = DEFAULT_GAMMA
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        for name in ('levels', 'heads', 'points', 'channels'):
            if getattr(self, name) < 1:
                raise ShapeError(f"VCE {name} must be at least 1, got {getattr(self, name)}")


@dataclass
class VceParams:
    """
    Per level l and head m: value W_lm (C×C), attention φ^a_lm (K×C) and offset
    φ^o_lm (2K×C) weights, indexed ``value[l][m]``. ``out_proj`` is the C×(L·C)
    aggregation W_o; the fusion norm has its own C-vector gain and bias.
    """

    value: list
    attn_proj: list
    offset_proj: list
    out_proj: Tensor
    norm_gain: Tensor
    norm_bias: Tensor
    gamma: float = DEFAULT_GAMMA
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        channels = self.channels
        if not (len(self.value) == len(self.attn_proj) == len(self.offset_proj) >= 1):
            raise ShapeError("value, attention and offset projections must cover the same levels")
        points = self.points
        for level in range(self.num_levels):
            heads = (self.value[level], self.attn_proj[level], self.offset_proj[level])
            if not (len(heads[0]) == len(heads[1]) == len(heads[2]) == self.num_heads):
                raise ShapeError(f"Level {level} does not have {self.num_heads} heads in every projection")
            for value, attn, offset in zip(*heads):
                if value.shape != (channels, channels):
                    raise ShapeError(f"Value projection must be C×C, got {value.shape}")
                if attn.shape != (points, channels) or offset.shape != (2 * points, channels):
                    raise ShapeError(
                        f"Attention/offset projections must be K×C and 2K×C, got {attn.shape} and {offset.shape}"
                    )
        if self.out_proj.shape != (channels, self.num_levels * channels):
            raise ShapeError(f"W_o must be C×(L·C), got {self.out_proj.shape}")
        if self.norm_gain.shape != (channels,) or self.norm_bias.shape != (channels,):
            raise ShapeError("Fusion norm gain and bias must be C-vectors")

    @property
    def num_levels(self) -> int:
        return len(self.value)

    @property
    def num_heads(self) -> int:
        return len(self.value[0])

    @property
    def points(self) -> int:
        return self.attn_proj[0][0].shape[0]

    @property
    def channels(self) -> int:
        return self.out_proj.shape[0]

    @property
    def config(self) -> VceConfig:
        return VceConfig(self.num_levels, self.num_heads, self.points, self.channels, self.gamma, self.eps)

    def trainable(self) -> dict:
        tensors = {}
        for level in range(self.num_levels):
            for head in range(self.num_heads):
                prefix = f'level{level}.head{head}'
                tensors[f'{prefix}.value'] = self.value[level][head]
                tensors[f'{prefix}.attn'] = self.attn_proj[level][head]
                tensors[f'{prefix}.offset'] = self.offset_proj[level][head]
        tensors.update(out_proj=self.out_proj, norm_gain=self.norm_gain, norm_bias=self.norm_bias)
        return tensors


def _uniform(rng: Rng, shape: tuple, fan_in: int, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True, name=name)


def _zeros(shape: tuple, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def init_vce(config: VceConfig, rng: Rng, zero_output: bool = False,
             offset_scale: Optional[float] = None) -> VceParams:
    """
    Fresh VCE parameters

    Offset and attention projections start at zero, so every head initially
    samples its anchor position K times with uniform weights. Value projections
    and W_o draw from the fan-in uniform range.

    Args:
        zero_output: Start W_o at zero so the cue vanishes and the output is Norm(F*)
        offset_scale: Draw attention/offset weights from ±offset_scale instead of zero
    """
    c, k = config.channels, config.points
    value, attn, offset = [], [], []
    for level in range(config.levels):
        level_rng = rng.child('level', level)
        value.append([])
        attn.append([])
        offset.append([])
        for head in range(config.heads):
            head_rng = level_rng.child('head', head)
            name = f'l{level}h{head}'
            value[-1].append(_uniform(head_rng.child('value'), (c, c), c, f'{name}.value'))
            if offset_scale is None:
                attn[-1].append(_zeros((k, c), f'{name}.attn'))
                offset[-1].append(_zeros((2 * k, c), f'{name}.offset'))
            else:
                attn[-1].append(Tensor(head_rng.child('attn').uniform(-offset_scale, offset_scale, (k, c)),
                                       requires_grad=True, name=f'{name}.attn'))
                offset[-1].append(Tensor(head_rng.child('offset').uniform(-offset_scale, offset_scale, (2 * k, c)),
                                         requires_grad=True, name=f'{name}.offset'))

    out_shape = (c, config.levels * c)
    out_proj = (_zeros(out_shape, 'out_proj') if zero_output
                else _uniform(rng.child('out'), out_shape, config.levels * c, 'out_proj'))
    return VceParams(
        value=value,
        attn_proj=attn,
        offset_proj=offset,
        out_proj=out_proj,
        norm_gain=Tensor(np.ones(c), requires_grad=True, name='norm_gain'),
        norm_bias=_zeros((c,), 'norm_bias'),
        gamma=config.gamma,
        eps=config.eps,
    )


@dataclass(frozen=True)
class VceSize:
    parameters: int
    bytes: int
    megabytes: float


def count_vce_params(config: VceConfig, bytes_per_param: int = HALF_PRECISION_BYTES) -> VceSize:
    """
    Closed-form VCE size: L·M·(C² + K·C + 2K·C) + L·C² + 2C

    Megabytes are MiB (2**20 bytes). γ is a fixed hyperparameter and is not counted.
    """
    l, m, k, c = config.levels, config.heads, config.points, config.channels
    count = l * m * (c * c + k * c + 2 * k * c) + l * c * c + 2 * c
    size = count * bytes_per_param
    return VceSize(parameters=count, bytes=size, megabytes=size / 2 ** 20)
