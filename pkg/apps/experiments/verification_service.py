"""
Verification Service
Runs the invariant suites behind ``manage.py verify`` and returns one record per
check with the measured error and its tolerance.
"""
import logging
from typing import Optional

import numpy as np

from apps.adapters.exceptions import AdapterConfigError
from apps.adapters.initialization import init_adapter
from apps.adapters.layers import adapter_forward
from apps.adapters.params import DualLoraParams, FrozenLinear, GateStrategy, MoeParams
from apps.expressiveness.verification import (
    BudgetError, compare_routed_fits, verify_cor1, verify_cor2, verify_prop1,
)
from apps.numeric import ops
from apps.numeric.exceptions import ContractError, NonFiniteError, ShapeError
from apps.numeric.gradcheck import DEFAULT_STEP, gradient_errors
from apps.numeric.rng import Rng
from apps.numeric.tensor import Tensor
from apps.vce.attention import CueHeatmap, attention_weights, vce_cue, vce_forward
from apps.vce.params import VceConfig, init_vce
from apps.vce.pyramid import FeaturePyramid

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-4
EXACT_TOLERANCE = 1e-12
KINK_MARGIN = 10.0
QUICK_SUITES = ('grad', 'prop1', 'cor1', 'cor2', 'vce')
SUITES = QUICK_SUITES + ('routed', 'all')


def _check(suite: str, name: str, error: float, tolerance: float, verdict: Optional[bool] = None,
           **details) -> dict:
    error = float(error)
    passed = bool(np.isfinite(error) and error < tolerance) if verdict is None else bool(verdict)
    return {
        'suite': suite,
        'check': name,
        'error': error,
        'tolerance': tolerance,
        'passed': passed,
        'details': details,
    }


def kink_distance(params, x: np.ndarray) -> float:
    """
    Smallest distance of any token from a non-differentiable point of the adapter

    ReLU gate pre-activations for Dual-LoRA and rectified MoE; the gap between
    the k-th and (k+1)-th router logit for TopK. Smooth adapters give inf.
    """
    if isinstance(params, DualLoraParams) and params.use_gate_activation:
        return float(np.abs(x @ params.T.data.T).min())
    if isinstance(params, MoeParams):
        logits = x @ params.router.data.T
        if params.strategy is GateStrategy.RECTIFIED:
            return float(np.abs(logits).min())
        if params.strategy is GateStrategy.TOP_K and params.top_k < params.num_experts:
            ordered = -np.sort(-logits, axis=-1)
            return float((ordered[:, params.top_k - 1] - ordered[:, params.top_k]).min())
    return float('inf')


def kink_free_inputs(params, rng: Rng, shape: tuple, h: float = DEFAULT_STEP, attempts: int = 100) -> np.ndarray:
    """
    Draw inputs whose pre-activations stay KINK_MARGIN·h·max|x| clear of every kink

    A step of h on one router or gate weight moves a pre-activation by at most
    h·max|x|, so central differences never straddle a kink.

    Raises:
        ContractError: no draw clears the margin
    """
    for attempt in range(attempts):
        x = rng.child('x', attempt).normal(shape)
        if kink_distance(params, x) > KINK_MARGIN * h * max(1.0, float(np.abs(x).max())):
            return x
    raise ContractError(f"No input within {attempts} draws keeps clear of the adapter's kinks")


class VerificationService:
    """Service to run numerical verification suites"""

    def __init__(self, config: dict):
        self.config = config

    def run(self, suite: str) -> list:
        """
        Checks of one suite; 'all' runs every quick suite ('routed' trains and runs only on request)

        Raises:
            ValueError: unknown suite name
        """
        if suite not in SUITES:
            raise ValueError(f"Unknown suite '{suite}'")
        names = QUICK_SUITES if suite == 'all' else (suite,)
        records = []
        for name in names:
            logger.info(f"Running suite {name}")
            try:
                records.extend(getattr(self, f'suite_{name}')())
            except (ShapeError, ContractError, NonFiniteError, AdapterConfigError, BudgetError, AssertionError) as e:
                logger.error(f"Suite {name} aborted: {e}")
                records.append(_check(name, 'aborted', float('inf'), 0.0, reason=str(e)))
        return records

    # -- gradients --------------------------------------------------------

    def _adapter_grad_errors(self, kind: str, label: str, seed: int, **options) -> float:
        rng = Rng(seed).child('grad', label)
        d_in, d_out, rank = 6, 5, 3
        layer = FrozenLinear.from_array(rng.child('W').normal((d_out, d_in)))
        ranks = [2, 2, 1] if kind == 'moe' else rank
        params = init_adapter(kind, (d_in, d_out), ranks, seed=seed, **options)
        # Non-zero output projections so every path carries gradient
        for name, tensor in params.trainable().items():
            if name.endswith('B'):
                tensor.assign(rng.child('B', name).normal(tensor.shape))
        x = Tensor(kink_free_inputs(params, rng, (4, d_in)))
        weights = rng.child('R').normal((4, d_out))

        def loss():
            return ops.sum(ops.mul(adapter_forward(layer, params, x), weights))

        errors = gradient_errors(loss, params.trainable(), h=DEFAULT_STEP)
        if layer.weight.grad is not None:
            raise AssertionError("Frozen weight received a gradient")
        return max(errors.values())

    def _vce_grad_errors(self, seed: int) -> float:
        rng = Rng(seed).child('grad', 'vce')
        config = VceConfig(levels=2, heads=2, points=2, channels=4)
        pyramid = FeaturePyramid([rng.child('level', l).normal((3, 3, 4)) for l in range(config.levels)])
        params = init_vce(config, rng.child('params'), offset_scale=0.3)
        params.norm_gain.assign(rng.child('gain').uniform(0.5, 1.5, 4))
        weights = rng.child('R').normal((3, 3, 4))

        def loss():
            enhanced, _ = vce_forward(pyramid, params)
            return ops.sum(ops.mul(enhanced, weights))

        return max(gradient_errors(loss, params.trainable(), h=1e-6).values())

    def suite_grad(self) -> list:
        records = []
        count = self.config.get('grad_instances', 10)
        cases = [
            ('lora', {}),
            ('dual_lora', {}),
            ('moe', {'strategy': GateStrategy.TOP_K, 'top_k': 2}),
            ('moe', {'strategy': GateStrategy.SOFTMAX_DENSE}),
            ('moe', {'strategy': GateStrategy.RECTIFIED}),
        ]
        for kind, options in cases:
            label = kind if not options else f"{kind}_{options['strategy'].value}"
            errors = [self._adapter_grad_errors(kind, label, seed, **options) for seed in range(count)]
            records.append(_check('grad', label, max(errors), GRAD_TOLERANCE, instances=count))
        errors = [self._vce_grad_errors(seed) for seed in range(count)]
        records.append(_check('grad', 'vce', max(errors), GRAD_TOLERANCE, instances=count))
        return records

    # -- rank composition --------------------------------------------------

    def suite_prop1(self) -> list:
        k, d = self.config.get('k', 3), self.config.get('d', 8)
        seed0 = self.config.get('seed', 0)
        count = self.config.get('instances', 20)
        reports = [verify_prop1(k, d, d, seed0 + i) for i in range(count)]
        collinear = verify_prop1(k, d, d, seed0, collinear=True)
        single = verify_prop1(1, d, d, seed0)
        rank_excess = max(r.ranks['numerical_rank'] - r.ranks['budget'] for r in reports)
        return [
            _check('prop1', f'rank{k}_fit', max(r.error for r in reports), reports[0].tolerance,
                   k=k, d=d, instances=count),
            _check('prop1', 'rank_bound', max(rank_excess, 0), 0.5),
            _check('prop1', 'collinear_rank1_fit', collinear.details['rank1_error'], collinear.tolerance,
                   numerical_rank=collinear.ranks['numerical_rank']),
            _check('prop1', 'single_term', single.error, single.tolerance),
        ]

    def suite_cor1(self) -> list:
        d = self.config.get('cor1_d', 16)
        count = self.config.get('instances', 20)
        records = []
        for pattern in ([2, 2, 2, 2], [4, 2, 1, 1], [3]):
            reports = [verify_cor1(pattern, d, d, seed) for seed in range(count)]
            excess = max(r.ranks['numerical_rank'] - r.ranks['budget'] for r in reports)
            records.append(_check('cor1', f"ranks_{'_'.join(map(str, pattern))}",
                                  max(r.error for r in reports), reports[0].tolerance,
                                  instances=count, rank_excess=excess))
        return records

    def suite_cor2(self) -> list:
        ranks = self.config.get('cor2_ranks', [2, 1])
        budget = self.config.get('cor2_budget', 4)
        count = self.config.get('instances', 20)
        reports = [verify_cor2(ranks, budget, 8, 6, seed) for seed in range(count)]
        full = verify_cor2([budget], budget, 8, 6, 0)
        return [
            _check('cor2', 'grouped_gates', max(r.error for r in reports), EXACT_TOLERANCE,
                   ranks=list(ranks), budget=budget, instances=count),
            _check('cor2', 'single_full_group', full.error, EXACT_TOLERANCE),
        ]

    def suite_routed(self) -> list:
        report = compare_routed_fits(
            self.config.get('routed_seeds', [0, 1, 2, 3, 4]),
            steps=self.config.get('routed_steps', 5000),
            lr=self.config.get('routed_lr', 0.05),
        )
        return [_check('routed', 'dual_vs_lora', report.error, report.tolerance, verdict=report.passed,
                       d=report.dims['d'], **report.details)]

    # -- VCE ---------------------------------------------------------------

    def suite_vce(self) -> list:
        seed = self.config.get('seed', 0)
        rng = Rng(seed).child('vce_suite')
        channels = 6
        pyramid = FeaturePyramid([rng.child('level', l).normal((5, 5, channels)) for l in range(3)])
        records = []

        random_params = init_vce(VceConfig(levels=3, heads=2, points=3, channels=channels),
                                 rng.child('random'), offset_scale=0.5)
        weights = np.stack([attention_weights(level, (r, c), random_params, index)
                            for index, level in enumerate(pyramid.levels)
                            for r in range(5) for c in range(5)])
        records.append(_check('vce', 'attention_simplex', np.abs(weights.sum(axis=-1) - 1.0).max(), EXACT_TOLERANCE))

        cue = vce_cue(pyramid, random_params)
        heatmap = CueHeatmap.from_cue(cue)
        oracle = np.array([[np.sqrt(np.sum(cue.data[r, c] ** 2)) for c in range(5)] for r in range(5)])
        records.append(_check('vce', 'heatmap_norms', np.abs(heatmap.values - oracle).max(), EXACT_TOLERANCE))

        outputs = []
        for heads, points in ((1, 1), (2, 4), (3, 2)):
            params = init_vce(VceConfig(levels=3, heads=heads, points=points, channels=channels), rng.child('zero'))
            # One value map split evenly over the heads plus a shared W_o
            for level in range(3):
                for head in range(heads):
                    params.value[level][head].assign(rng.child('value', level).normal((channels, channels)) / heads)
            params.out_proj.assign(rng.child('out').normal(params.out_proj.shape))
            outputs.append(vce_forward(pyramid, params)[0].data)
        spread = max(np.abs(out - outputs[0]).max() for out in outputs)
        records.append(_check('vce', 'zero_init_independent_of_heads_points', spread, 1e-10))

        silent = init_vce(VceConfig(levels=3, heads=2, points=3, channels=channels), rng.child('silent'),
                          zero_output=True)
        enhanced, _ = vce_forward(pyramid, silent)
        anchor = pyramid.anchor.data
        centred = anchor - anchor.mean(axis=-1, keepdims=True)
        normed = centred / np.sqrt(anchor.var(axis=-1, keepdims=True) + silent.eps)
        records.append(_check('vce', 'zero_cue_gives_norm_anchor', np.abs(enhanced.data - normed).max(), 1e-10))

        return records
