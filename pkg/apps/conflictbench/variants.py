"""
Named adapter variants compared by the benchmark

A variant name is a base adapter name, optionally suffixed with ``+vce`` to put
the VCE front-end in front of the toy model.
"""

from dataclasses import asdict, dataclass, field
from typing import Optional

from apps.adapters.accounting import closed_form_param_count, dual_rank_for_budget
from apps.adapters.exceptions import AdapterConfigError
from apps.adapters.initialization import init_adapter
from apps.adapters.params import AdapterKind, GateStrategy, ScaleRule

VCE_SUFFIX = '+vce'

BASE_VARIANTS = (
    'lora', 'dual_lora', 'dual_lora_no_norm', 'dual_lora_no_gate',
    'moe_top2', 'moe_softmax', 'moe_rectified',
)


class Matching:
    RANK = 'rank'
    PARAMS = 'params'
    CHOICES = (RANK, PARAMS)


@dataclass(frozen=True)
class AdapterSpec:
    kind: AdapterKind
    ranks: tuple
    alpha: Optional[float] = None
    dropout: float = 0.0
    scale_rule: ScaleRule = ScaleRule.R_OVER_ALPHA
    options: dict = field(default_factory=dict)

    def build(self, d_in: int, d_out: int, seed: int):
        rank = list(self.ranks) if self.kind is AdapterKind.MOE else self.ranks[0]
        return init_adapter(self.kind, (d_in, d_out), rank, self.alpha, seed,
                            dropout=self.dropout, scale_rule=self.scale_rule, **self.options)

    def param_count(self, d_in: int, d_out: int) -> int:
        rank = list(self.ranks) if self.kind is AdapterKind.MOE else self.ranks[0]
        return closed_form_param_count(self.kind, d_in, d_out, rank, self.options.get('use_norm', True))

    def to_dict(self) -> dict:
        record = asdict(self)
        record['kind'] = self.kind.value
        record['ranks'] = list(self.ranks)
        record['scale_rule'] = self.scale_rule.value
        record['options'] = {k: getattr(v, 'value', v) for k, v in self.options.items()}
        return record


@dataclass(frozen=True)
class Variant:
    name: str
    adapter: Optional[AdapterSpec]
    use_vce: bool = False


def parse_variant(name: str) -> tuple:
    """('dual_lora+vce') -> ('dual_lora', True)"""
    base, use_vce = (name[:-len(VCE_SUFFIX)], True) if name.endswith(VCE_SUFFIX) else (name, False)
    if base not in BASE_VARIANTS:
        raise AdapterConfigError(f"Unknown variant '{name}'; choose from {', '.join(BASE_VARIANTS)} (optionally +vce)")
    return base, use_vce


def _split_rank(total: int, parts: int) -> list:
    if total < parts:
        raise AdapterConfigError(f"Total rank {total} cannot be split over {parts} experts")
    share = total // parts
    return [share + (1 if index < total % parts else 0) for index in range(parts)]


def _heterogeneous_ranks(total: int) -> list:
    """Halving pattern r/2, r/4, r/8, r/8 (e.g. 32, 16, 8, 8 for 64)"""
    if total < 8:
        return _split_rank(total, min(total, 4))
    ranks = [total // 2, total // 4, total // 8]
    return ranks + [total - sum(ranks)]


def build_variant(name: str, total_rank: int, d_model: int, matching: str = Matching.RANK,
                  alpha: Optional[float] = None, dropout: float = 0.0,
                  scale_rule: ScaleRule = ScaleRule.R_OVER_ALPHA) -> Variant:
    """
    Adapter spec of a named variant at a total rank budget

    Under ``params`` matching the Dual-LoRA variants use the largest rank whose
    parameter count does not exceed that of a rank-``total_rank`` LoRA.
    """
    base, use_vce = parse_variant(name)
    if matching not in Matching.CHOICES:
        raise AdapterConfigError(f"matching must be one of {Matching.CHOICES}, got '{matching}'")
    common = dict(alpha=alpha, dropout=dropout, scale_rule=ScaleRule(scale_rule))

    if base == 'lora':
        spec = AdapterSpec(AdapterKind.LORA, (total_rank,), **common)
    elif base.startswith('dual_lora'):
        options = {
            'use_norm': base != 'dual_lora_no_norm',
            'use_gate_activation': base != 'dual_lora_no_gate',
        }
        rank = total_rank
        if matching == Matching.PARAMS:
            budget = closed_form_param_count(AdapterKind.LORA, d_model, d_model, total_rank)
            rank = dual_rank_for_budget(d_model, d_model, budget, options['use_norm'])
        spec = AdapterSpec(AdapterKind.DUAL_LORA, (rank,), options=options, **common)
    elif base == 'moe_top2':
        spec = AdapterSpec(AdapterKind.MOE, tuple(_split_rank(total_rank, 4)),
                           options={'strategy': GateStrategy.TOP_K, 'top_k': 2}, **common)
    elif base == 'moe_softmax':
        spec = AdapterSpec(AdapterKind.MOE, tuple(_split_rank(total_rank, 4)),
                           options={'strategy': GateStrategy.SOFTMAX_DENSE}, **common)
    else:
        spec = AdapterSpec(AdapterKind.MOE, tuple(_heterogeneous_ranks(total_rank)),
                           options={'strategy': GateStrategy.RECTIFIED}, **common)
    return Variant(name=name, adapter=spec, use_vce=use_vce)

