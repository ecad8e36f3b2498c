"""
Primitive differentiable operations

Every function takes Tensors (or array-likes, treated as constants) and returns a
Tensor. Backward closures return one gradient per input in input order.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .exceptions import ShapeError
from .tensor import Tensor, as_tensor, record

DEFAULT_EPS = 1e-5


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'add')

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record('add', (a, b), a.data + b.data, backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'sub')

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record('sub', (a, b), a.data - b.data, backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'mul')

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record('mul', (a, b), a.data * b.data, backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record('neg', (a,), -a.data, lambda g: (-g,))


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return record('scale', (a,), a.data * factor, lambda g: (g * factor,))


def matmul(a, b) -> Tensor:
    """
    Matrix product with numpy matmul semantics for 1-D and batched operands

    Raises:
        ShapeError: inner dimensions differ
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul needs at least 1-D operands, got {a.shape} and {b.shape}")
    x = a.data if a.ndim > 1 else a.data[None, :]
    y = b.data if b.ndim > 1 else b.data[:, None]
    if x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        if a.ndim == 1 and b.ndim == 1:
            g = np.reshape(g, (1, 1))
        elif a.ndim == 1:
            g = np.expand_dims(g, -2)
        elif b.ndim == 1:
            g = np.expand_dims(g, -1)
        grad_a = np.matmul(g, np.swapaxes(y, -1, -2))
        grad_b = np.matmul(np.swapaxes(x, -1, -2), g)
        return (
            _unbroadcast(grad_a, x.shape).reshape(a.shape),
            _unbroadcast(grad_b, y.shape).reshape(b.shape),
        )

    return record('matmul', (a, b), out, backward)


def transpose(a) -> Tensor:
    """Swap the last two axes"""
    a = as_tensor(a)
    if a.ndim < 2:
        return a
    return record('transpose', (a,), np.swapaxes(a.data, -1, -2), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"Cannot reshape {a.shape} to {tuple(shape)}") from exc
    return record('reshape', (a,), out, lambda g: (g.reshape(a.shape),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(part, (list, np.ndarray)) for part in parts)

    def backward(g):
        grad = np.zeros(a.shape)
        if fancy:
            np.add.at(grad, index, g)
        else:
            grad[index] += g
        return (grad,)

    return record('getitem', (a,), a.data[index], backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record('concat', tensors, out, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in tensors]}") from exc

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record('stack', tensors, out, backward)


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return record('sum', (a,), out, lambda g: (_expand_reduced(g, a.shape, axis, keepdims),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size / max(out.size, 1)
    return record('mean', (a,), out, lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,))


def relu(a) -> Tensor:
    """Elementwise max(0, x); the gradient is 1 where x > 0 and 0 elsewhere"""
    a = as_tensor(a)
    active = a.data > 0
    return record('relu', (a,), np.where(active, a.data, 0.0), lambda g: (g * active,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return record('tanh', (a,), out, lambda g: (g * (1.0 - out ** 2),))


def softmax(a, axis: int = -1) -> Tensor:
    """Exponential normalisation along ``axis`` with max subtraction"""
    a = as_tensor(a)
    if a.ndim == 0:
        raise ShapeError("softmax needs at least one axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    out = exps / exps.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record('softmax', (a,), out, backward)


def masked_softmax(a, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to entries where ``mask`` is true; masked entries are exactly 0"""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"mask shape {mask.shape} differs from logits shape {a.shape}")
    peak = np.where(mask, a.data, -np.inf).max(axis=axis, keepdims=True)
    exps = np.where(mask, np.exp(np.where(mask, a.data - peak, 0.0)), 0.0)
    out = exps / exps.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record('masked_softmax', (a,), out, backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - log_norm
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return record('log_softmax', (a,), out, backward)


def layer_norm(a, gain, bias, eps: float = DEFAULT_EPS) -> Tensor:
    """
    Normalise over the last axis with the population variance, then apply gain and bias

    Args:
        a: Input whose last axis is normalised
        gain: Vector matching the last axis
        bias: Vector matching the last axis
        eps: Variance damping, must be positive
    """
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    width = a.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({width},)")
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")

    centered = a.data - a.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    out = normed * gain.data + bias.data

    def backward(g):
        d_normed = g * gain.data
        d_input = inv_std * (
            d_normed
            - d_normed.mean(axis=-1, keepdims=True)
            - normed * (d_normed * normed).mean(axis=-1, keepdims=True)
        )
        d_gain = (g * normed).reshape(-1, width).sum(axis=0)
        d_bias = g.reshape(-1, width).sum(axis=0)
        return d_input, d_gain, d_bias

    return record('layer_norm', (a, gain, bias), out, backward)


def bilinear_sample(feature_map, positions) -> Tensor:
    """
    Bilinear interpolation of an H×W×C map at fractional (row, col) positions

    Positions are clamped to [0, H-1]×[0, W-1] before interpolation, so reads never
    leave the grid. The result is differentiable with respect to the map values
    and to the positions (zero along a clamped coordinate).

    Args:
        feature_map: Tensor of shape (H, W, C)
        positions: (row, col) pair, or array/Tensor of shape (..., 2)

    Returns:
        Tensor of shape (C,) for a single pair, else (..., C)
    """
    feature_map = as_tensor(feature_map)
    positions = as_tensor(positions)
    if feature_map.ndim != 3:
        raise ShapeError(f"bilinear_sample needs an H×W×C map, got shape {feature_map.shape}")
    if positions.shape[-1:] != (2,):
        raise ShapeError(f"positions must end with a (row, col) axis, got shape {positions.shape}")

    height, width, channels = feature_map.shape
    values = feature_map.data
    flat = positions.data.reshape(-1, 2)
    row = np.clip(flat[:, 0], 0.0, height - 1)
    col = np.clip(flat[:, 1], 0.0, width - 1)
    r0 = np.floor(row).astype(np.intp)
    c0 = np.floor(col).astype(np.intp)
    r1 = np.minimum(r0 + 1, height - 1)
    c1 = np.minimum(c0 + 1, width - 1)
    fr = (row - r0)[:, None]
    fc = (col - c0)[:, None]

    v00, v01 = values[r0, c0], values[r0, c1]
    v10, v11 = values[r1, c0], values[r1, c1]
    w00, w01 = (1 - fr) * (1 - fc), (1 - fr) * fc
    w10, w11 = fr * (1 - fc), fr * fc
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
    out_shape = positions.shape[:-1] + (channels,)

    def backward(g):
        g = g.reshape(-1, channels)
        grad_map = np.zeros(values.shape)
        np.add.at(grad_map, (r0, c0), w00 * g)
        np.add.at(grad_map, (r0, c1), w01 * g)
        np.add.at(grad_map, (r1, c0), w10 * g)
        np.add.at(grad_map, (r1, c1), w11 * g)

        row_inside = (flat[:, 0] >= 0) & (flat[:, 0] <= height - 1)
        col_inside = (flat[:, 1] >= 0) & (flat[:, 1] <= width - 1)
        d_row = ((1 - fc) * (v10 - v00) + fc * (v11 - v01)) * g
        d_col = ((1 - fr) * (v01 - v00) + fr * (v11 - v10)) * g
        grad_pos = np.stack([d_row.sum(axis=1) * row_inside, d_col.sum(axis=1) * col_inside], axis=-1)
        return grad_map, grad_pos.reshape(positions.shape)

    return record('bilinear_sample', (feature_map, positions), out.reshape(out_shape), backward)


def mse_loss(prediction, target) -> Tensor:
    """Mean of squared differences over every element"""
    prediction, target = as_tensor(prediction), as_tensor(target)
    if prediction.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {prediction.shape} vs target {target.shape}")
    diff = prediction.data - target.data
    count = max(diff.size, 1)

    def backward(g):
        grad = 2.0 * diff / count * g
        return grad, -grad

    return record('mse_loss', (prediction, target), np.array((diff ** 2).sum() / count), backward)


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits) over the last axis"""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.shape[:-1] != labels.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    log_probs = log_softmax(logits, axis=-1)
    rows = np.indices(labels.shape)
    picked = getitem(log_probs, (*rows, labels))
    return neg(mean(picked))


def dropout(a, rate: float, rng: Optional['Rng'] = None, training: bool = False) -> Tensor:  # noqa: F821
    """Inverted dropout; the identity in eval mode or at rate 0"""
    a = as_tensor(a)
    if not training or rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("training-mode dropout needs an Rng")
    keep = rng.bernoulli(1.0 - rate, a.shape) / (1.0 - rate)
    return mul(a, keep)
