"""
Adapter forward passes

All forwards accept a single token x of shape (d_in,) or any stack of tokens
(..., d_in); routing and gating are computed independently per token.
"""

import logging
from typing import Optional, Union

import numpy as np

from apps.numeric import ops
from apps.numeric.exceptions import ShapeError
from apps.numeric.rng import Rng
from apps.numeric.tensor import Tensor, as_tensor

from .params import DualActivations, DualLoraParams, FrozenLinear, GateStrategy, LoraParams, MoeParams

logger = logging.getLogger(__name__)

AdapterParams = Union[LoraParams, DualLoraParams, MoeParams]


def _check_dims(layer: FrozenLinear, d_in: int, d_out: int, x: Tensor) -> None:
    if layer.d_in != d_in or layer.d_out != d_out:
        raise ShapeError(
            f"Adapter maps {d_in}->{d_out} but the frozen layer maps {layer.d_in}->{layer.d_out}"
        )
    if x.shape[-1:] != (d_in,):
        raise ShapeError(f"Input last axis must be {d_in}, got shape {x.shape}")


def frozen_forward(layer: FrozenLinear, x) -> Tensor:
    """Wx for every token"""
    return ops.matmul(x, ops.transpose(layer.weight))


def lora_delta(p: LoraParams, x) -> Tensor:
    """(scale)·B·A·x without the frozen term"""
    hidden = ops.matmul(x, ops.transpose(p.A))
    return ops.scale(ops.matmul(hidden, ops.transpose(p.B)), p.scaling)


def lora_forward(layer: FrozenLinear, p: LoraParams, x, training: bool = False,
                 rng: Optional[Rng] = None) -> Tensor:
    """
    z = Wx + (scale)·B·A·x̃ where x̃ is x after dropout in training mode

    Raises:
        ShapeError: layer, adapter and input dimensions disagree
    """
    x = as_tensor(x)
    _check_dims(layer, p.d_in, p.d_out, x)
    adapter_input = ops.dropout(x, p.dropout, rng, training)
    return ops.add(frozen_forward(layer, x), lora_delta(p, adapter_input))


def dual_lora_branch(p: DualLoraParams, x) -> DualActivations:
    """
    Skill and rectified activations for the adapter input

    skill = Norm(Sx) (or Sx with the norm ablated), gate = ReLU(Tx) (or Tx with
    the activation ablated), rectified = skill ⊙ gate.
    """
    x = as_tensor(x)
    skill = ops.matmul(x, ops.transpose(p.S))
    if p.use_norm:
        skill = ops.layer_norm(skill, p.norm_gain, p.norm_bias, p.eps)
    gate = ops.matmul(x, ops.transpose(p.T))
    if p.use_gate_activation:
        gate = ops.relu(gate)
    return DualActivations(skill=skill, gate=gate, rectified=ops.mul(skill, gate))


def dual_lora_delta(p: DualLoraParams, x) -> tuple:
    activations = dual_lora_branch(p, x)
    delta = ops.scale(ops.matmul(activations.rectified, ops.transpose(p.B)), p.scaling)
    return delta, activations


def dual_lora_forward(layer: FrozenLinear, p: DualLoraParams, x, training: bool = False,
                      rng: Optional[Rng] = None, observer=None) -> Tensor:
    """
    z = Wx + (scale)·B·(Norm(Sx̃) ⊙ ReLU(Tx̃))

    Args:
        observer: Optional callable receiving the DualActivations of this call
    """
    x = as_tensor(x)
    _check_dims(layer, p.d_in, p.d_out, x)
    adapter_input = ops.dropout(x, p.dropout, rng, training)
    delta, activations = dual_lora_delta(p, adapter_input)
    if observer is not None:
        observer(activations)
    return ops.add(frozen_forward(layer, x), delta)


def top_k_mask(logits: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest logits per token (ties broken by expert index)"""
    order = np.argsort(-logits, axis=-1, kind='stable')[..., :k]
    mask = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def moe_gates(p: MoeParams, x) -> Tensor:
    """Per-token expert weights under the configured activation strategy"""
    logits = ops.matmul(as_tensor(x), ops.transpose(p.router))
    if p.strategy is GateStrategy.TOP_K:
        return ops.masked_softmax(logits, top_k_mask(logits.data, p.top_k), axis=-1)
    if p.strategy is GateStrategy.SOFTMAX_DENSE:
        return ops.softmax(logits, axis=-1)
    return ops.relu(logits)


def moe_delta(p: MoeParams, x) -> tuple:
    """Gate-weighted expert sum; experts with a zero gate on every token are not evaluated"""
    x = as_tensor(x)
    gates = moe_gates(p, x)
    delta = None
    for index, expert in enumerate(p.experts):
        if not gates.data[..., index].any():
            continue
        weight = ops.getitem(gates, (..., slice(index, index + 1)))
        contribution = ops.mul(weight, lora_delta(expert, x))
        delta = contribution if delta is None else ops.add(delta, contribution)
    if delta is None:
        delta = Tensor(np.zeros(x.shape[:-1] + (p.d_out,)))
    return delta, gates


def moe_forward(layer: FrozenLinear, p: MoeParams, x, training: bool = False,
                rng: Optional[Rng] = None) -> Tensor:
    """
    z = Wx + Σ_e g_e·(scale_e)·B_e·A_e·x̃ with g from the router strategy

    TopK: softmax over the k largest logits, others 0. SoftmaxDense: softmax over
    all E logits. Rectified: ReLU of the logits, unnormalised.
    """
    x = as_tensor(x)
    _check_dims(layer, p.d_in, p.d_out, x)
    adapter_input = ops.dropout(x, p.dropout, rng, training)
    delta, _ = moe_delta(p, adapter_input)
    return ops.add(frozen_forward(layer, x), delta)


def adapter_forward(layer: FrozenLinear, p: Optional[AdapterParams], x, training: bool = False,
                    rng: Optional[Rng] = None, observer=None) -> Tensor:
    """Dispatch to the forward matching the parameter type; the bare layer when p is None"""
    if p is None:
        return frozen_forward(layer, as_tensor(x))
    if isinstance(p, LoraParams):
        return lora_forward(layer, p, x, training, rng)
    if isinstance(p, DualLoraParams):
        return dual_lora_forward(layer, p, x, training, rng, observer)
    return moe_forward(layer, p, x, training, rng)


def effective_update(p: DualLoraParams, gate) -> np.ndarray:
    """
    d_out×d_in map B·diag(gate)·S realised under a fixed binary gate (norm bypassed)

    Raises:
        ValueError: gate entries outside {0, 1} or wrong length
    """
    gate = np.asarray(gate, dtype=np.float64)
    if gate.shape != (p.rank,):
        raise ShapeError(f"Gate must have length {p.rank}, got shape {gate.shape}")
    if not np.all((gate == 0.0) | (gate == 1.0)):
        raise ValueError("Gate entries must be 0 or 1")
    return p.B.data @ (gate[:, None] * p.S.data)
