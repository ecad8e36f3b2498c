"""
Conflict benchmark failures that carry their partial results
"""


class TrainingDiverged(RuntimeError):
    """A loss became non-finite; ``report`` holds the metrics recorded so far"""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class UnstableMeasurement(RuntimeError):
    """Latency samples spread too widely to be trusted; ``rows`` holds every measured variant"""

    def __init__(self, message: str, rows=None):
        super().__init__(message)
        self.rows = rows or []
