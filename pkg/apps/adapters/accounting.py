"""
Trainable-parameter accounting
"""

from typing import Sequence, Union

from .params import AdapterKind, DualLoraParams, LoraParams, MoeParams


def closed_form_param_count(kind: Union[AdapterKind, str], d_in: int, d_out: int,
                            rank: Union[int, Sequence[int]], use_norm: bool = True) -> int:
    """
    Trainable parameters of an adapter from its dimensions alone

    LoRA: r(d_in + d_out). Dual-LoRA: r(2·d_in + d_out) + 2r (the norm affine,
    dropped when the norm is ablated). MoE: Σ_e r_e(d_in + d_out) + E·d_in.
    """
    kind = AdapterKind(kind)
    if kind is AdapterKind.MOE:
        ranks = list(rank) if isinstance(rank, (list, tuple)) else [int(rank)]
        return sum(r * (d_in + d_out) for r in ranks) + len(ranks) * d_in
    r = int(rank)
    if kind is AdapterKind.LORA:
        return r * (d_in + d_out)
    return r * (2 * d_in + d_out) + (2 * r if use_norm else 0)


def param_count(params) -> int:
    if isinstance(params, LoraParams):
        return closed_form_param_count(AdapterKind.LORA, params.d_in, params.d_out, params.rank)
    if isinstance(params, DualLoraParams):
        return closed_form_param_count(
            AdapterKind.DUAL_LORA, params.d_in, params.d_out, params.rank, use_norm=params.use_norm
        )
    if isinstance(params, MoeParams):
        return closed_form_param_count(AdapterKind.MOE, params.d_in, params.d_out, params.ranks)
    raise TypeError(f"Not an adapter parameter set: {type(params).__name__}")


def dual_rank_for_budget(d_in: int, d_out: int, budget: int, use_norm: bool = True) -> int:
    """Largest Dual-LoRA rank whose parameter count stays within ``budget`` (at least 1)"""
    per_rank = 2 * d_in + d_out + (2 if use_norm else 0)
    return max(1, budget // per_rank)
