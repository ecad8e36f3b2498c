"""
Errors raised by the tensor core and everything built on it
"""


class ShapeError(ValueError):
    """Operand shapes are inconsistent for the requested operation"""


class ContractError(RuntimeError):
    """A precondition of an operation was violated (non-scalar loss, reused tape, ...)"""


class NonFiniteError(FloatingPointError):
    """A tensor holds NaN or Inf where finite values are required"""
