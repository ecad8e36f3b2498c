"""
Dense f64 tensors and the reverse-mode gradient tape

A Tensor wraps a read-only float64 numpy buffer. Operations executed while a
Tape is active (``with Tape() as tape:``) and touching at least one tensor with
``requires_grad`` are recorded in execution order, which is a topological order
of the computation. ``tape.backward(loss)`` walks the record once in reverse and
accumulates gradients into the leaf tensors.
"""

from __future__ import annotations

import contextvars
import logging
from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .exceptions import ContractError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

_active_tape: contextvars.ContextVar[Optional['Tape']] = contextvars.ContextVar('active_tape', default=None)


class Tensor:
    """Dense n-dimensional array of 64-bit floats"""

    __slots__ = ('_data', 'requires_grad', 'grad', 'name')

    def __init__(self, data: Any, requires_grad: bool = False, name: str = ''):
        array = np.array(data.data if isinstance(data, Tensor) else data, dtype=np.float64)
        array.setflags(write=False)
        self._data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ''
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def assign(self, values: Any) -> None:
        """Replace the buffer (parameter updates happen only between steps)"""
        array = np.array(values, dtype=np.float64)
        if array.shape != self.shape:
            raise ShapeError(f"Cannot assign shape {array.shape} to tensor of shape {self.shape}")
        array.setflags(write=False)
        self._data = array

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self._data)))

    def check_finite(self, context: str = '') -> 'Tensor':
        if not self.is_finite():
            where = f" in {context}" if context else ''
            raise NonFiniteError(f"Non-finite values{where} (shape {self.shape})")
        return self

    def detach(self) -> 'Tensor':
        return Tensor(self._data, requires_grad=False, name=self.name)

    @classmethod
    def zeros(cls, shape: Sequence[int], **kwargs) -> 'Tensor':
        return cls(np.zeros(tuple(shape)), **kwargs)

    @classmethod
    def ones(cls, shape: Sequence[int], **kwargs) -> 'Tensor':
        return cls(np.ones(tuple(shape)), **kwargs)

    @classmethod
    def eye(cls, n: int, **kwargs) -> 'Tensor':
        return cls(np.eye(n), **kwargs)

    # Operators delegate to the primitive ops so they are recorded on the tape
    def __add__(self, other):
        return _ops.add(self, other)

    def __radd__(self, other):
        return _ops.add(other, self)

    def __sub__(self, other):
        return _ops.sub(self, other)

    def __rsub__(self, other):
        return _ops.sub(other, self)

    def __mul__(self, other):
        return _ops.mul(self, other)

    def __rmul__(self, other):
        return _ops.mul(other, self)

    def __neg__(self):
        return _ops.neg(self)

    def __matmul__(self, other):
        return _ops.matmul(self, other)

    def __getitem__(self, index):
        return _ops.getitem(self, index)

    @property
    def T(self) -> 'Tensor':
        return _ops.transpose(self)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops.reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return _ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return _ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of primitive operations for one forward pass"""

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._consumed = False
        self._token = None

    def __enter__(self) -> 'Tape':
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc_info) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def record(self, op: str, inputs: tuple, output: Tensor, backward: Callable) -> None:
        if self._consumed:
            raise ContractError("Cannot record on a tape that was already run backward; call reset() first")
        self.entries.append(TapeEntry(op, inputs, output, backward))

    def reset(self) -> None:
        self.entries = []
        self._consumed = False

    def backward(self, loss: Tensor) -> list[Tensor]:
        """
        Accumulate reverse-mode gradients of a scalar loss into leaf tensors

        Args:
            loss: Single-element tensor produced by an operation on this tape

        Returns:
            The leaf tensors that received a gradient, in first-use order
        """
        if self._consumed:
            raise ContractError("backward() was already called on this tape without reset()")
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")

        produced = {id(entry.output) for entry in self.entries}
        if id(loss) not in produced:
            raise ContractError("Loss tensor was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        leaves: dict[int, Tensor] = {}

        for entry in reversed(self.entries):
            upstream = grads.pop(id(entry.output), None)
            if upstream is None:
                continue
            input_grads = entry.backward(upstream)
            for tensor, grad in zip(entry.inputs, input_grads):
                if grad is None or not isinstance(tensor, Tensor) or not tensor.requires_grad:
                    continue
                key = id(tensor)
                grads[key] = grads[key] + grad if key in grads else grad
                if key not in produced:
                    leaves[key] = tensor

        for key, tensor in leaves.items():
            grad = grads[key]
            tensor.grad = grad if tensor.grad is None else tensor.grad + grad

        self._consumed = True
        logger.debug(f"Backward over {len(self.entries)} tape entries reached {len(leaves)} leaves")
        return list(reversed(list(leaves.values())))


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


def record(op: str, inputs: tuple, output: np.ndarray, backward: Callable) -> Tensor:
    """Wrap a primitive result and put it on the active tape when it needs gradients"""
    tape = _active_tape.get()
    needs_grad = tape is not None and any(
        isinstance(tensor, Tensor) and tensor.requires_grad for tensor in inputs
    )
    result = Tensor(output, requires_grad=needs_grad)
    if needs_grad:
        tape.record(op, inputs, result, backward)
    return result


def backward(tape: Tape, loss: Tensor) -> list[Tensor]:
    return tape.backward(loss)


from . import ops as _ops  # noqa: E402
