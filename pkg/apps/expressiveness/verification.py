"""
Constructive checks of how grouped low-rank adapters compose

Three statements are checked numerically:
  * a sum of K rank-1 updates is reproduced exactly by one rank-K LoRA;
  * a set of LoRA groups never needs more than one LoRA of the summed rank;
  * one Dual-LoRA of rank r ≥ Σ r_k realises every group B_k·A_k under a fixed
    binary gate, and learns input-dependent routing between opposing linear maps.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from apps.adapters.initialization import init_dual_lora, init_lora
from apps.adapters.layers import dual_lora_delta, effective_update, lora_delta
from apps.adapters.params import DualLoraParams
from apps.numeric import ops
from apps.numeric.optim import sgd_step
from apps.numeric.rng import Rng
from apps.numeric.tensor import Tape, Tensor

logger = logging.getLogger(__name__)

EXACT_TOLERANCE = 1e-10
CONSTRUCTION_TOLERANCE = 1e-12
RANK_RELATIVE_CUTOFF = 1e-10


class BudgetError(ValueError):
    """Summed group rank exceeds the available rank budget"""


@dataclass
class LoraGroupSet:
    """Groups (B_k: d_out×r_k, A_k: r_k×d_in)"""

    groups: list

    @classmethod
    def random(cls, ranks: Sequence[int], d_in: int, d_out: int, rng: Rng) -> 'LoraGroupSet':
        groups = [
            (rng.child('B', k).normal((d_out, r)), rng.child('A', k).normal((r, d_in)))
            for k, r in enumerate(ranks)
        ]
        return cls(groups)

    @property
    def ranks(self) -> list:
        return [a.shape[0] for _, a in self.groups]

    @property
    def total_rank(self) -> int:
        return sum(self.ranks)

    @property
    def d_in(self) -> int:
        return self.groups[0][1].shape[1]

    @property
    def d_out(self) -> int:
        return self.groups[0][0].shape[0]

    def group_map(self, k: int) -> np.ndarray:
        b, a = self.groups[k]
        return b @ a

    def combined(self) -> np.ndarray:
        return sum(self.group_map(k) for k in range(len(self.groups)))


@dataclass
class VerificationReport:
    statement: str
    dims: dict
    error: float
    tolerance: float
    ranks: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    # Set by checks whose verdict is more than error < tolerance
    criteria_met: Optional[bool] = None

    @property
    def passed(self) -> bool:
        if self.criteria_met is not None:
            return self.criteria_met
        return bool(self.error < self.tolerance)

    def to_dict(self) -> dict:
        record = asdict(self)
        record['passed'] = self.passed
        return record


def numerical_rank(matrix: np.ndarray, relative_cutoff: float = RANK_RELATIVE_CUTOFF) -> int:
    """Count of singular values above ``relative_cutoff``·σ_max"""
    singular = np.linalg.svd(matrix, compute_uv=False)
    if singular.size == 0 or singular[0] == 0.0:
        return 0
    return int(np.sum(singular > relative_cutoff * singular[0]))


def truncated_svd_fit(matrix: np.ndarray, rank: int) -> tuple:
    """
    Best rank-``rank`` factorisation B·A of a matrix

    Returns:
        (B: d_out×rank, A: rank×d_in, Frobenius reconstruction error)
    """
    u, s, vt = np.linalg.svd(matrix, full_matrices=False)
    root = np.sqrt(s[:rank])
    b = u[:, :rank] * root
    a = root[:, None] * vt[:rank]
    return b, a, float(np.linalg.norm(matrix - b @ a, 'fro'))


def verify_prop1(k: int, d_in: int, d_out: int, seed: int, collinear: bool = False,
                 tolerance: float = EXACT_TOLERANCE) -> VerificationReport:
    """
    Sum K random rank-1 updates and refit them with a single rank-K LoRA

    Args:
        collinear: Use multiples of one input direction for every a_k
    """
    if not 1 <= k <= min(d_in, d_out):
        raise BudgetError(f"Need 1 <= K <= min(d_in, d_out) = {min(d_in, d_out)}, got K={k}")
    rng = Rng(seed).child('prop1')
    b = rng.child('b').normal((k, d_out))
    a = rng.child('a').normal((k, d_in))
    if collinear:
        a = rng.child('c').normal((k, 1)) * a[:1]
    delta = b.T @ a

    _, _, error = truncated_svd_fit(delta, k)
    _, _, rank1_error = truncated_svd_fit(delta, 1)
    report = VerificationReport(
        statement='prop1',
        dims={'K': k, 'd_in': d_in, 'd_out': d_out, 'seed': seed},
        error=error,
        tolerance=tolerance,
        ranks={'numerical_rank': numerical_rank(delta), 'budget': k},
        details={'collinear': collinear, 'rank1_error': rank1_error},
    )
    logger.debug(f"prop1 K={k} d=({d_in},{d_out}) seed={seed}: error {error:.3e}")
    return report


def verify_cor1(ranks: Sequence[int], d_in: int, d_out: int, seed: int,
                tolerance: float = EXACT_TOLERANCE) -> VerificationReport:
    """Sum LoRA groups of the given ranks and refit with one LoRA of rank Σ ranks"""
    ranks = [int(r) for r in ranks]
    budget = sum(ranks)
    if not ranks or min(ranks) < 1 or budget > min(d_in, d_out):
        raise BudgetError(f"Need positive ranks with sum <= {min(d_in, d_out)}, got {ranks}")
    groups = LoraGroupSet.random(ranks, d_in, d_out, Rng(seed).child('cor1'))
    combined = groups.combined()
    _, _, error = truncated_svd_fit(combined, budget)
    return VerificationReport(
        statement='cor1',
        dims={'ranks': ranks, 'd_in': d_in, 'd_out': d_out, 'seed': seed},
        error=error,
        tolerance=tolerance,
        ranks={'numerical_rank': numerical_rank(combined), 'budget': budget},
    )


def construct_grouped_dual(groups: LoraGroupSet, budget: int) -> tuple:
    """
    Stack LoRA groups into one Dual-LoRA skill/output pair

    Group k occupies rank rows offset_k .. offset_k + r_k - 1 of S and the same
    columns of B; unused rank slots stay zero. The norm is the identity and T is
    zero because the fixed-gate statement concerns B(A ⊙ σ(T)) before normalisation.

    Returns:
        (DualLoraParams, list of binary gates, one per group)

    Raises:
        BudgetError: Σ r_k > budget
    """
    if groups.total_rank > budget:
        raise BudgetError(f"Groups need rank {groups.total_rank} but the budget is {budget}")
    s = np.zeros((budget, groups.d_in))
    b = np.zeros((groups.d_out, budget))
    gates = []
    offset = 0
    for b_k, a_k in groups.groups:
        r_k = a_k.shape[0]
        s[offset:offset + r_k] = a_k
        b[:, offset:offset + r_k] = b_k
        gate = np.zeros(budget)
        gate[offset:offset + r_k] = 1.0
        gates.append(gate)
        offset += r_k

    params = DualLoraParams(
        S=Tensor(s, name='S'),
        T=Tensor(np.zeros_like(s), name='T'),
        B=Tensor(b, name='B'),
        alpha=float(budget),
        norm_gain=Tensor(np.ones(budget), name='norm_gain'),
        norm_bias=Tensor(np.zeros(budget), name='norm_bias'),
    )
    return params, gates


def verify_cor2(ranks: Sequence[int], budget: int, d_in: int, d_out: int, seed: int,
                tolerance: float = CONSTRUCTION_TOLERANCE) -> VerificationReport:
    """Largest Frobenius gap between each gated map and its group, and between the union gate and the sum"""
    groups = LoraGroupSet.random([int(r) for r in ranks], d_in, d_out, Rng(seed).child('cor2'))
    params, gates = construct_grouped_dual(groups, budget)
    errors = [
        float(np.linalg.norm(effective_update(params, gate) - groups.group_map(k), 'fro'))
        for k, gate in enumerate(gates)
    ]
    union = np.clip(sum(gates), 0.0, 1.0)
    union_error = float(np.linalg.norm(effective_update(params, union) - groups.combined(), 'fro'))
    empty_norm = float(np.linalg.norm(effective_update(params, np.zeros(budget)), 'fro'))
    return VerificationReport(
        statement='cor2',
        dims={'ranks': list(ranks), 'budget': budget, 'd_in': d_in, 'd_out': d_out, 'seed': seed},
        error=max(errors + [union_error, empty_norm]),
        tolerance=tolerance,
        ranks={'gate_popcounts': [int(g.sum()) for g in gates], 'budget': budget},
        details={'group_errors': errors, 'union_error': union_error},
    )


@dataclass
class RoutedCluster:
    """Inputs (n×d) that should be mapped by ``target`` (d_out×d)"""

    inputs: np.ndarray
    target: np.ndarray


def opposing_clusters(d: int = 2, per_cluster: int = 64, seed: int = 0, margin: float = 0.5,
                      spread: float = 1.0) -> list:
    """
    Two clusters on opposite sides of the hyperplane x_1 = 0 with targets +I and -I

    Coordinate 1 lies in [margin, margin + spread] (mirrored for the second
    cluster); the other coordinates are uniform in [-spread/2, spread/2].
    """
    rng = Rng(seed).child('clusters')
    clusters = []
    for sign, label in ((1.0, 'positive'), (-1.0, 'negative')):
        stream = rng.child(label)
        x = stream.uniform(-spread / 2, spread / 2, (per_cluster, d))
        x[:, 0] = sign * stream.uniform(margin, margin + spread, per_cluster)
        clusters.append(RoutedCluster(inputs=x, target=sign * np.eye(d)))
    return clusters


def _augment(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)


def _fit_routed(kind: str, clusters: Sequence[RoutedCluster], budget: int, steps: int, seed: int,
                lr: float, tolerance: float) -> VerificationReport:
    target_rank = sum(numerical_rank(c.target) for c in clusters)
    if target_rank > budget:
        raise BudgetError(f"Targets need rank {target_rank} but the budget is {budget}")

    inputs = np.concatenate([_augment(c.inputs) for c in clusters])
    targets = Tensor(np.concatenate([c.inputs @ c.target.T for c in clusters]))
    features = Tensor(inputs)
    d_in, d_out = inputs.shape[1], targets.shape[1]
    rng = Rng(seed).child('routed', kind)
    # α = r makes the branch scale 1, i.e. the bare B(Norm(Sx) ⊙ ReLU(Tx))
    if kind == 'dual_lora':
        params = init_dual_lora(d_in, d_out, budget, float(budget), rng)

        def predict():
            return dual_lora_delta(params, features)[0]
    else:
        params = init_lora(d_in, d_out, budget, float(budget), rng)

        def predict():
            return lora_delta(params, features)

    trainable = params.trainable()
    trace = []
    diverged = False
    for step in range(steps):
        with Tape() as tape:
            loss = ops.mse_loss(predict(), targets)
        value = loss.item()
        if not np.isfinite(value):
            diverged = True
            logger.warning(f"Routed fit ({kind}, seed {seed}) diverged at step {step}")
            break
        if step % 100 == 0:
            trace.append(value)
        if value == 0.0:
            break
        tape.backward(loss)
        sgd_step(trainable.values(), lr)

    final = float('inf') if diverged else ops.mse_loss(predict(), targets).item()
    if not np.isfinite(final):
        final = float('inf')
    return VerificationReport(
        statement=f'routed_{kind}',
        dims={'budget': budget, 'd_in': d_in, 'd_out': d_out, 'clusters': len(clusters), 'seed': seed},
        error=final,
        tolerance=tolerance,
        ranks={'target_rank': target_rank, 'budget': budget},
        details={'steps': steps, 'lr': lr, 'loss_trace': trace, 'diverged': diverged},
    )


def fit_dual_to_routed_target(clusters: Sequence[RoutedCluster], budget: int, steps: int = 5000,
                              seed: int = 0, lr: float = 0.05,
                              tolerance: float = 1e-3) -> VerificationReport:
    """
    Train S, T, B so that B(Norm(Sx) ⊙ ReLU(Tx)) ≈ target_k·x on every cluster

    Inputs get a constant 1 coordinate so affine gating hyperplanes are
    expressible by a linear T. Non-convergence is reported as a failed report.
    """
    return _fit_routed('dual_lora', clusters, budget, steps, seed, lr, tolerance)


def fit_lora_to_routed_target(clusters: Sequence[RoutedCluster], budget: int, steps: int = 5000,
                              seed: int = 0, lr: float = 0.05,
                              tolerance: float = 1e-3) -> VerificationReport:
    """The same training run with a plain rank-``budget`` LoRA"""
    return _fit_routed('lora', clusters, budget, steps, seed, lr, tolerance)


def compare_routed_fits(seeds: Sequence[int], budget: int = 4, steps: int = 5000, lr: float = 0.05,
                        d: int = 2, tolerance: float = 1e-3, ratio: float = 10.0,
                        required_passes: Optional[int] = None) -> VerificationReport:
    """
    Paired Dual-LoRA / LoRA fits on opposing clusters over several seeds

    Passes when at least ``required_passes`` Dual-LoRA fits reach the tolerance
    and the median LoRA MSE is at least ``ratio`` times the median Dual-LoRA MSE.
    """
    seeds = list(seeds)
    required = len(seeds) - 1 if required_passes is None else required_passes
    dual, plain = [], []
    for seed in seeds:
        clusters = opposing_clusters(d=d, seed=seed)
        dual.append(fit_dual_to_routed_target(clusters, budget, steps, seed, lr, tolerance))
        plain.append(fit_lora_to_routed_target(clusters, budget, steps, seed, lr, tolerance))

    dual_median = float(np.median([r.error for r in dual]))
    plain_median = float(np.median([r.error for r in plain]))
    passes = sum(r.passed for r in dual)
    separated = plain_median >= ratio * dual_median
    return VerificationReport(
        statement='cor2_routed',
        dims={'budget': budget, 'd': d, 'seeds': seeds, 'steps': steps},
        error=dual_median,
        tolerance=tolerance,
        details={
            'dual_mse': [r.error for r in dual],
            'lora_mse': [r.error for r in plain],
            'dual_passes': passes,
            'required_passes': required,
            'lora_median': plain_median,
            'ratio_target': ratio,
            'separated': separated,
        },
        criteria_met=bool(passes >= required and separated),
    )
