"""
Deformable local attention, multi-level aggregation and residual fusion

For an anchor position p on level map F_l and head m:
    Δp = φ^o(F_l(p)) reshaped K×2, A = softmax(φ^a(F_l(p)))
    head_m = W_lm · Σ_k A(k)·F_l(p + Δp(k))
Heads are summed per level, levels are concatenated and projected by W_o into
the cue F′, and the enhanced map is Norm(F* + γ·F′) per position.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from apps.numeric import ops
from apps.numeric.exceptions import ShapeError
from apps.numeric.optim import sgd_step
from apps.numeric.tensor import Tape, Tensor, as_tensor

from .params import VceParams
from .pyramid import FeaturePyramid

logger = logging.getLogger(__name__)


def _deform_attn(feature_map: Tensor, anchors: np.ndarray, params: VceParams, level: int) -> Tensor:
    """Attention output for integer (N, 2) anchors on one level; returns (N, C)"""
    count, points = anchors.shape[0], params.points
    anchor_features = ops.getitem(feature_map, (anchors[:, 0], anchors[:, 1]))
    output = None
    for head in range(params.num_heads):
        logits = ops.matmul(anchor_features, ops.transpose(params.attn_proj[level][head]))
        weights = ops.softmax(logits, axis=-1)
        offsets = ops.reshape(
            ops.matmul(anchor_features, ops.transpose(params.offset_proj[level][head])),
            (count, points, 2),
        )
        positions = ops.add(anchors[:, None, :].astype(np.float64), offsets)
        samples = ops.bilinear_sample(feature_map, positions)
        pooled = ops.sum(ops.mul(ops.reshape(weights, (count, points, 1)), samples), axis=1)
        head_output = ops.matmul(pooled, ops.transpose(params.value[level][head]))
        output = head_output if output is None else ops.add(output, head_output)
    return output


def deform_attn_level(feature_map, position: Sequence[int], params: VceParams, level: int) -> Tensor:
    """
    Deformable attention of one level at one grid position

    Offsets are unconstrained; sampling clamps them to the grid.

    Returns:
        Tensor of shape (C,)
    """
    feature_map = as_tensor(feature_map)
    height, width = feature_map.shape[:2]
    row, col = (int(v) for v in position)
    if not (0 <= row < height and 0 <= col < width):
        raise ShapeError(f"Anchor {position} lies outside the {height}×{width} grid")
    anchors = np.array([[row, col]], dtype=np.intp)
    return ops.reshape(_deform_attn(feature_map, anchors, params, level), (feature_map.shape[2],))


def attention_weights(feature_map, position: Sequence[int], params: VceParams, level: int) -> np.ndarray:
    """(M, K) softmax weights used at one anchor, for inspection"""
    feature = as_tensor(feature_map).data[int(position[0]), int(position[1])]
    logits = np.stack([attn.data @ feature for attn in params.attn_proj[level]])
    return ops.softmax(logits, axis=-1).data


def aggregate_levels(features: Sequence, out_proj) -> Tensor:
    """
    W_o applied to the concatenation of per-level features

    Raises:
        ShapeError: feature widths do not add up to the input width of W_o
    """
    features = [as_tensor(f) for f in features]
    out_proj = as_tensor(out_proj)
    total = sum(f.shape[-1] for f in features)
    if out_proj.ndim != 2 or out_proj.shape[1] != total:
        raise ShapeError(f"W_o of shape {out_proj.shape} cannot project {len(features)} features of total width {total}")
    return ops.matmul(ops.concat(features, axis=-1), ops.transpose(out_proj))


def fuse_residual(anchor_map, cue_map, gamma: float, gain, bias, eps: float) -> Tensor:
    """Norm(F* + γ·F′) over the channel axis at every position"""
    anchor_map, cue_map = as_tensor(anchor_map), as_tensor(cue_map)
    if anchor_map.shape != cue_map.shape:
        raise ShapeError(f"Anchor map {anchor_map.shape} and cue {cue_map.shape} differ in shape")
    return ops.layer_norm(ops.add(anchor_map, ops.scale(cue_map, gamma)), gain, bias, eps)


@dataclass
class CueHeatmap:
    """Per-position ℓ2 norm of the cue F′"""

    values: np.ndarray

    @classmethod
    def from_cue(cls, cue) -> 'CueHeatmap':
        return cls(np.linalg.norm(as_tensor(cue).data, axis=-1))

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def argmax(self) -> tuple:
        row, col = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return int(row), int(col)

    def normalized(self) -> np.ndarray:
        """Values scaled to [0, 1]; a flat map becomes all zeros"""
        span = self.values.max() - self.values.min()
        if span == 0.0:
            return np.zeros_like(self.values)
        return (self.values - self.values.min()) / span


def vce_cue(pyramid: FeaturePyramid, params: VceParams) -> Tensor:
    """F′ as an H×W×C map"""
    if pyramid.num_levels != params.num_levels or pyramid.channels != params.channels:
        raise ShapeError(
            f"Pyramid has {pyramid.num_levels} levels of {pyramid.channels} channels, "
            f"parameters expect {params.num_levels} of {params.channels}"
        )
    anchors = pyramid.grid_positions()
    per_level = [_deform_attn(level_map, anchors, params, index) for index, level_map in enumerate(pyramid.levels)]
    cue = aggregate_levels(per_level, params.out_proj)
    return ops.reshape(cue, (pyramid.height, pyramid.width, pyramid.channels))


def vce_forward(pyramid: FeaturePyramid, params: VceParams) -> tuple:
    """
    Enhance the anchor map of a pyramid

    Returns:
        (enhanced H×W×C Tensor, CueHeatmap)
    """
    cue = vce_cue(pyramid, params)
    enhanced = fuse_residual(pyramid.anchor, cue, params.gamma, params.norm_gain, params.norm_bias, params.eps)
    return enhanced, CueHeatmap.from_cue(cue)


def cue_target(pyramid: FeaturePyramid, mask: np.ndarray, direction: np.ndarray, strength: float = 2.0,
               gamma: float = 1.0, eps: float = 1e-5) -> Tensor:
    """Norm(F* + γ·E) where E is ``strength``·direction inside the mask and zero elsewhere"""
    cue = np.zeros(pyramid.anchor.shape)
    cue[mask] = strength * np.asarray(direction)
    channels = pyramid.channels
    return ops.layer_norm(ops.add(pyramid.anchor, ops.scale(cue, gamma)), np.ones(channels), np.zeros(channels), eps)


def fit_vce(pyramid: FeaturePyramid, params: VceParams, target, steps: int = 200, lr: float = 0.5,
            log_every: Optional[int] = None) -> list:
    """
    SGD on the MSE between the enhanced map and ``target``

    Returns:
        Loss per step
    """
    target = as_tensor(target)
    trainable = list(params.trainable().values())
    losses = []
    for step in range(steps):
        with Tape() as tape:
            enhanced, _ = vce_forward(pyramid, params)
            loss = ops.mse_loss(enhanced, target)
        loss.check_finite(f'VCE fit step {step}')
        losses.append(loss.item())
        tape.backward(loss)
        sgd_step(trainable, lr)
        if log_every and step % log_every == 0:
            logger.info(f"VCE fit step {step}: loss {losses[-1]:.6f}")
    return losses
