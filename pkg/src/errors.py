"""Exception hierarchy shared by every module of the lab."""

from typing import Optional


class ESLabError(Exception):
    pass


class DimensionError(ESLabError):
    """Operand shapes do not agree."""


class UsageError(ESLabError):
    """An API was called in a state it does not support."""


class DomainError(ESLabError):
    """A value lies outside the domain an operation accepts."""


class CheckpointError(ESLabError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class DatasetFormatError(ESLabError):
    pass


class BudgetExhaustedError(ESLabError):
    def __init__(self, requested: int, used: int, budget: int):
        super().__init__(
            f"query budget exhausted: {used} used + {requested} requested > {budget}"
        )
        self.requested = requested
        self.used = used
        self.budget = budget


class SynthesisError(ESLabError):
    pass


class TrainingError(ESLabError):
    pass


class ConfigError(ESLabError):
    pass


class OracleProtocolError(ESLabError):
    def __init__(self, code: str, status: Optional[int] = None):
        super().__init__(f"oracle error response: {code} (status {status})")
        self.code = code
        self.status = status
