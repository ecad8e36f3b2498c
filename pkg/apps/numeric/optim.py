"""
Plain stochastic gradient descent
"""

from typing import Iterable

from .tensor import Tensor


def sgd_step(tensors: Iterable[Tensor], lr: float) -> None:
    """p ← p - lr·∇p for every tensor holding a gradient, then clear the gradients"""
    for tensor in tensors:
        if tensor.grad is not None:
            tensor.assign(tensor.data - lr * tensor.grad)
        tensor.zero_grad()
