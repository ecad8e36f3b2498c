"""
Single-threaded forward latency of adapter variants

Every variant adapts the same frozen d×d layer on the same input tokens. Each
raw sample times ``inner`` consecutive forwards; rows report the median per
forward and the ratio to vanilla LoRA, and keep the raw samples.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from apps.adapters.layers import adapter_forward
from apps.adapters.params import FrozenLinear
from apps.numeric.rng import Rng
from apps.vce.attention import vce_forward
from apps.vce.params import VceConfig, init_vce
from apps.vce.pyramid import FeaturePyramid

from .exceptions import UnstableMeasurement
from .variants import build_variant

logger = logging.getLogger(__name__)

BASELINE = 'lora'
DEFAULT_VARIANTS = ('lora', 'moe_top2', 'moe_softmax', 'dual_lora', 'dual_lora+vce')
MIN_REPS = 100
MAX_CV = 0.10


@dataclass
class LatencyRow:
    variant: str
    median: float
    mean: float
    cv: float
    ratio: float = 1.0
    param_count: int = 0
    samples: list = field(default_factory=list, repr=False)

    @property
    def stable(self) -> bool:
        return self.cv <= MAX_CV

    def to_dict(self) -> dict:
        return {'variant': self.variant, 'median_s': self.median, 'mean_s': self.mean, 'cv': self.cv,
                'ratio': self.ratio, 'param_count': self.param_count}


def _time(call, reps: int, warmup: int, inner: int) -> list:
    for _ in range(warmup):
        call()
    samples = []
    for _ in range(reps):
        start = time.perf_counter_ns()
        for _ in range(inner):
            call()
        samples.append((time.perf_counter_ns() - start) / inner / 1e9)
    return samples


def summarize(variant: str, samples: Sequence[float]) -> LatencyRow:
    values = np.asarray(samples, dtype=np.float64)
    mean = float(values.mean())
    return LatencyRow(variant=variant, median=float(np.median(values)), mean=mean,
                      cv=float(values.std() / mean) if mean > 0 else 0.0, samples=list(samples))


def normalize(rows: list, baseline: str = BASELINE) -> list:
    """Set each row's ratio to its median over the baseline median"""
    reference = next((row for row in rows if row.variant == baseline), None)
    if reference is None:
        raise ValueError(f"Latency table needs the '{baseline}' baseline row")
    for row in rows:
        row.ratio = row.median / reference.median
    return rows


def latency_bench(variants: Sequence[str] = DEFAULT_VARIANTS, d: int = 1024, total_rank: int = 64,
                  reps: int = 1000, warmup: int = 50, tokens: int = 1, inner: int = 5, seed: int = 0,
                  vce_config: VceConfig = VceConfig(), vce_grid: tuple = (4, 4),
                  max_cv: float = MAX_CV) -> list:
    """
    Median forward latency per variant at matched total rank

    Raises:
        ValueError: fewer than 100 reps or no LoRA baseline
        UnstableMeasurement: some variant's samples have a coefficient of variation above ``max_cv``
    """
    if reps < MIN_REPS:
        raise ValueError(f"latency_bench needs at least {MIN_REPS} reps, got {reps}")
    rng = Rng(seed).child('latency')
    layer = FrozenLinear.from_array(rng.child('W').normal((d, d), scale=1.0 / np.sqrt(d)))
    x = rng.child('x').normal((tokens, d))

    rows = []
    for name in variants:
        variant = build_variant(name, total_rank, d)
        params = variant.adapter.build(d, d, seed)
        if variant.use_vce:
            pyramid = FeaturePyramid([
                rng.child('pyramid', level).normal((*vce_grid, vce_config.channels))
                for level in range(vce_config.levels)
            ])
            vce = init_vce(vce_config, rng.child('vce'))

            def call(params=params, pyramid=pyramid, vce=vce):
                vce_forward(pyramid, vce)
                adapter_forward(layer, params, x)
        else:
            def call(params=params):
                adapter_forward(layer, params, x)

        row = summarize(name, _time(call, reps, warmup, inner))
        row.param_count = variant.adapter.param_count(d, d)
        rows.append(row)
        logger.info(f"{name}: median {row.median * 1e6:.1f} µs, cv {row.cv:.3f}")

    normalize(rows)
    unstable = [row.variant for row in rows if row.cv > max_cv]
    if unstable:
        raise UnstableMeasurement(f"Coefficient of variation above {max_cv:.0%} for {', '.join(unstable)}", rows)
    return rows


def ordering_holds(rows: list) -> bool:
    """Dual-LoRA < sparse top-2 MoE < dense softmax MoE and Dual-LoRA < Dual-LoRA+VCE, on ratios"""
    ratio = {row.variant: row.ratio for row in rows}
    needed = ('dual_lora', 'moe_top2', 'moe_softmax', 'dual_lora+vce')
    if any(name not in ratio for name in needed):
        return False
    return (ratio['dual_lora'] < ratio['moe_top2'] < ratio['moe_softmax']
            and ratio['dual_lora'] < ratio['dual_lora+vce'])
