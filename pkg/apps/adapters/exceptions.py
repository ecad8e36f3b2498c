"""
Adapter configuration and checkpoint errors
"""


class AdapterConfigError(ValueError):
    """Invalid adapter configuration (rank, strategy, k > E, ...)"""


class CheckpointError(ValueError):
    """Malformed or incompatible tensor checkpoint file"""
