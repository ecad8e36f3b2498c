"""
Adapter parameter sets

LoRA, Dual-LoRA and LoRA-MoE parameters live in plain dataclasses holding
Tensors. Weight matrices follow the (d_out, d_in) layout of the frozen layer
they adapt: A/S/T are (r, d_in), B is (d_out, r), the router is (E, d_in).
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from apps.numeric.ops import DEFAULT_EPS
from apps.numeric.tensor import Tensor

from .exceptions import AdapterConfigError


class AdapterKind(str, Enum):
    LORA = 'lora'
    DUAL_LORA = 'dual_lora'
    MOE = 'moe'


class GateStrategy(str, Enum):
    TOP_K = 'top_k'
    SOFTMAX_DENSE = 'softmax_dense'
    RECTIFIED = 'rectified'


class ScaleRule(str, Enum):
    R_OVER_ALPHA = 'r_over_alpha'
    ALPHA_OVER_R = 'alpha_over_r'


def scaling_factor(rank: int, alpha: float, rule: ScaleRule = ScaleRule.R_OVER_ALPHA) -> float:
    """Adapter branch scale; r/α literally, or the α/r convention of most LoRA code"""
    if ScaleRule(rule) is ScaleRule.R_OVER_ALPHA:
        return rank / alpha
    return alpha / rank


def default_alpha(rank: int) -> float:
    """α = 2·rank"""
    return 2.0 * rank


def _check_dropout(rate: float) -> None:
    if not 0.0 <= rate < 1.0:
        raise AdapterConfigError(f"Dropout must lie in [0, 1), got {rate}")


@dataclass
class FrozenLinear:
    """Pretrained d_out×d_in weight; never trainable"""

    weight: Tensor

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise AdapterConfigError(f"Frozen weight must be a matrix, got shape {self.weight.shape}")
        self.weight.requires_grad = False

    @classmethod
    def from_array(cls, array) -> 'FrozenLinear':
        return cls(Tensor(np.asarray(array, dtype=np.float64), name='W'))

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class LoraParams:
    kind = AdapterKind.LORA

    A: Tensor
    B: Tensor
    alpha: float
    dropout: float = 0.0
    scale_rule: ScaleRule = ScaleRule.R_OVER_ALPHA

    def __post_init__(self):
        if self.A.ndim != 2 or self.B.ndim != 2:
            raise AdapterConfigError("LoRA A and B must be matrices")
        if self.A.shape[0] < 1:
            raise AdapterConfigError("LoRA rank must be at least 1")
        if self.B.shape[1] != self.A.shape[0]:
            raise AdapterConfigError(f"LoRA B {self.B.shape} does not match rank of A {self.A.shape}")
        if self.alpha <= 0:
            raise AdapterConfigError(f"alpha must be positive, got {self.alpha}")
        _check_dropout(self.dropout)
        self.scale_rule = ScaleRule(self.scale_rule)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    @property
    def scaling(self) -> float:
        return scaling_factor(self.rank, self.alpha, self.scale_rule)

    def trainable(self) -> dict:
        return {'A': self.A, 'B': self.B}


@dataclass
class DualLoraParams:
    kind = AdapterKind.DUAL_LORA

    S: Tensor
    T: Tensor
    B: Tensor
    alpha: float
    norm_gain: Tensor
    norm_bias: Tensor
    dropout: float = 0.0
    eps: float = DEFAULT_EPS
    use_norm: bool = True
    use_gate_activation: bool = True
    scale_rule: ScaleRule = ScaleRule.R_OVER_ALPHA

    def __post_init__(self):
        if self.S.shape != self.T.shape or self.S.ndim != 2:
            raise AdapterConfigError(f"Skill S {self.S.shape} and task T {self.T.shape} must share an r×d_in shape")
        rank = self.S.shape[0]
        if self.B.ndim != 2 or self.B.shape[1] != rank:
            raise AdapterConfigError(f"Dual-LoRA B {self.B.shape} does not match rank {rank}")
        if self.norm_gain.shape != (rank,) or self.norm_bias.shape != (rank,):
            raise AdapterConfigError("Norm gain and bias must be r-vectors")
        if self.alpha <= 0:
            raise AdapterConfigError(f"alpha must be positive, got {self.alpha}")
        _check_dropout(self.dropout)
        self.scale_rule = ScaleRule(self.scale_rule)

    @property
    def rank(self) -> int:
        return self.S.shape[0]

    @property
    def d_in(self) -> int:
        return self.S.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    @property
    def scaling(self) -> float:
        return scaling_factor(self.rank, self.alpha, self.scale_rule)

    def trainable(self) -> dict:
        tensors = {'S': self.S, 'T': self.T, 'B': self.B}
        if self.use_norm:
            tensors.update(norm_gain=self.norm_gain, norm_bias=self.norm_bias)
        return tensors


@dataclass
class MoeParams:
    kind = AdapterKind.MOE

    experts: list
    router: Tensor
    strategy: GateStrategy
    top_k: Optional[int] = None
    dropout: float = 0.0

    def __post_init__(self):
        self.strategy = GateStrategy(self.strategy)
        if not self.experts:
            raise AdapterConfigError("A LoRA-MoE needs at least one expert")
        if self.router.shape != (len(self.experts), self.experts[0].d_in):
            raise AdapterConfigError(
                f"Router shape {self.router.shape} must be (E, d_in) = ({len(self.experts)}, {self.experts[0].d_in})"
            )
        if any(e.d_in != self.d_in or e.d_out != self.d_out for e in self.experts):
            raise AdapterConfigError("All experts must share d_in and d_out")
        if self.strategy is GateStrategy.TOP_K:
            if self.top_k is None or not 1 <= self.top_k <= len(self.experts):
                raise AdapterConfigError(f"TopK needs 1 <= k <= E={len(self.experts)}, got k={self.top_k}")
        _check_dropout(self.dropout)

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def ranks(self) -> list:
        return [expert.rank for expert in self.experts]

    @property
    def total_rank(self) -> int:
        return sum(self.ranks)

    @property
    def d_in(self) -> int:
        return self.experts[0].d_in

    @property
    def d_out(self) -> int:
        return self.experts[0].d_out

    def trainable(self) -> dict:
        tensors = {'router': self.router}
        for index, expert in enumerate(self.experts):
            for name, tensor in expert.trainable().items():
                tensors[f'expert{index}.{name}'] = tensor
        return tensors


@dataclass
class DualActivations:
    """Intermediate Dual-LoRA activations: Norm(Sx), σ(Tx) and their product"""

    skill: Tensor
    gate: Tensor
    rectified: Tensor

    def gate_liveness(self) -> float:
        """Fraction of strictly positive gate entries"""
        return float(np.mean(self.gate.data > 0))
