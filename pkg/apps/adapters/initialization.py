"""
Adapter initialisation

Down projections (A, S, T) and the router draw from uniform(-1/√d_in, 1/√d_in);
B starts at zero so every fresh adapter leaves the frozen layer unchanged; the
Dual-LoRA norm starts as the identity affine map.
"""

import logging
import math
from typing import Optional, Sequence, Union

import numpy as np

from apps.numeric.rng import Rng
from apps.numeric.tensor import Tensor

from .exceptions import AdapterConfigError
from .params import (
    AdapterKind, DualLoraParams, GateStrategy, LoraParams, MoeParams, ScaleRule, default_alpha,
)

logger = logging.getLogger(__name__)


def _fan_in_uniform(rng: Rng, shape: tuple, d_in: int, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(d_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True, name=name)


def _zeros(shape: tuple, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def init_lora(d_in: int, d_out: int, rank: int, alpha: Optional[float], rng: Rng,
              dropout: float = 0.0, scale_rule: ScaleRule = ScaleRule.R_OVER_ALPHA) -> LoraParams:
    return LoraParams(
        A=_fan_in_uniform(rng.child('A'), (rank, d_in), d_in, 'A'),
        B=_zeros((d_out, rank), 'B'),
        alpha=default_alpha(rank) if alpha is None else alpha,
        dropout=dropout,
        scale_rule=scale_rule,
    )


def init_dual_lora(d_in: int, d_out: int, rank: int, alpha: Optional[float], rng: Rng,
                   dropout: float = 0.0, scale_rule: ScaleRule = ScaleRule.R_OVER_ALPHA,
                   use_norm: bool = True, use_gate_activation: bool = True) -> DualLoraParams:
    return DualLoraParams(
        S=_fan_in_uniform(rng.child('S'), (rank, d_in), d_in, 'S'),
        T=_fan_in_uniform(rng.child('T'), (rank, d_in), d_in, 'T'),
        B=_zeros((d_out, rank), 'B'),
        alpha=default_alpha(rank) if alpha is None else alpha,
        norm_gain=Tensor(np.ones(rank), requires_grad=True, name='norm_gain'),
        norm_bias=_zeros((rank,), 'norm_bias'),
        dropout=dropout,
        use_norm=use_norm,
        use_gate_activation=use_gate_activation,
        scale_rule=scale_rule,
    )


def init_moe(d_in: int, d_out: int, ranks: Sequence[int], rng: Rng,
             strategy: GateStrategy = GateStrategy.TOP_K, top_k: Optional[int] = None,
             alpha: Optional[float] = None, dropout: float = 0.0,
             scale_rule: ScaleRule = ScaleRule.R_OVER_ALPHA) -> MoeParams:
    """
    LoRA-MoE with one expert per entry of ``ranks``

    Each expert gets α = 2·r_e unless ``alpha`` is given; TopK defaults to k = min(2, E).
    """
    strategy = GateStrategy(strategy)
    if strategy is GateStrategy.TOP_K and top_k is None:
        top_k = min(2, len(ranks))
    experts = [
        init_lora(d_in, d_out, rank, alpha, rng.child('expert', index), scale_rule=scale_rule)
        for index, rank in enumerate(ranks)
    ]
    router = _fan_in_uniform(rng.child('router'), (len(experts), d_in), d_in, 'router')
    return MoeParams(experts=experts, router=router, strategy=strategy, top_k=top_k, dropout=dropout)


def init_adapter(kind: Union[AdapterKind, str], dims: tuple, rank: Union[int, Sequence[int]],
                 alpha: Optional[float] = None, seed: int = 0, **options):
    """
    Build a freshly initialised adapter

    Args:
        kind: 'lora', 'dual_lora' or 'moe'
        dims: (d_in, d_out)
        rank: Rank, or the list of expert ranks for a MoE
        alpha: Scale numerator/denominator; None means 2·rank
        seed: Seed of the counter-based stream the weights are drawn from
        **options: dropout, scale_rule, use_norm, use_gate_activation, strategy, top_k

    Raises:
        AdapterConfigError: non-positive rank or dimensions
    """
    kind = AdapterKind(kind)
    d_in, d_out = (int(d) for d in dims)
    ranks = list(rank) if isinstance(rank, (list, tuple)) else [int(rank)]
    if d_in < 1 or d_out < 1:
        raise AdapterConfigError(f"Adapter dims must be positive, got {dims}")
    if not ranks or min(ranks) < 1:
        raise AdapterConfigError(f"Adapter rank must be at least 1, got {rank}")

    rng = Rng(seed).child(kind.value)
    dropout = options.get('dropout', 0.0)
    scale_rule = options.get('scale_rule', ScaleRule.R_OVER_ALPHA)

    if kind is AdapterKind.LORA:
        return init_lora(d_in, d_out, ranks[0], alpha, rng, dropout, scale_rule)
    if kind is AdapterKind.DUAL_LORA:
        return init_dual_lora(
            d_in, d_out, ranks[0], alpha, rng, dropout, scale_rule,
            use_norm=options.get('use_norm', True),
            use_gate_activation=options.get('use_gate_activation', True),
        )
    return init_moe(
        d_in, d_out, ranks, rng,
        strategy=options.get('strategy', GateStrategy.TOP_K),
        top_k=options.get('top_k'),
        alpha=alpha,
        dropout=dropout,
        scale_rule=scale_rule,
    )
