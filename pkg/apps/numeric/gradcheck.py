"""
Central finite differences as an independent gradient oracle
"""

import logging
from typing import Callable, Mapping, Union

import numpy as np

from .exceptions import ContractError
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5


def finite_diff_grad(f: Callable[[Tensor], Union[float, Tensor]], x: Union[Tensor, np.ndarray],
                     h: float = DEFAULT_STEP) -> np.ndarray:
    """
    Central-difference gradient of a scalar function

    Args:
        f: Scalar function of a Tensor (may return a float or a single-element Tensor)
        x: Point at which to differentiate
        h: Step size, must be positive

    Returns:
        Array shaped like ``x`` holding (f(x + h·e_i) - f(x - h·e_i)) / 2h per coordinate
    """
    if h <= 0:
        raise ContractError(f"finite_diff_grad needs h > 0, got {h}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros(base.shape)

    def evaluate(point: np.ndarray) -> float:
        value = f(Tensor(point))
        return value.item() if isinstance(value, Tensor) else float(value)

    for index in np.ndindex(base.shape):
        plus = base.copy()
        plus[index] += h
        minus = base.copy()
        minus[index] -= h
        grad[index] = (evaluate(plus) - evaluate(minus)) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative difference, floored so all-zero gradients compare as equal"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradient_errors(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                    h: float = DEFAULT_STEP) -> dict:
    """
    Compare tape gradients of ``loss_fn`` against finite differences for each parameter

    ``loss_fn`` must rebuild the loss from the current parameter buffers on every
    call; each parameter is perturbed in place through ``assign`` and restored.

    Returns:
        Mapping of parameter name to relative error
    """
    for param in params.values():
        param.requires_grad = True
        param.zero_grad()

    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)

    errors = {}
    for name, param in params.items():
        original = param.data
        analytic = param.grad if param.grad is not None else np.zeros(param.shape)

        def perturbed(point: Tensor, param=param) -> float:
            param.assign(point.data)
            return loss_fn().item()

        try:
            numeric = finite_diff_grad(perturbed, original, h)
        finally:
            param.assign(original)
        errors[name] = relative_error(analytic, numeric)
        logger.debug(f"Gradient check {name}: relative error {errors[name]:.3e}")
    return errors
