from __future__ import annotations


class SifError(Exception):
    """Base class for workbench errors."""


class ParameterError(SifError, ValueError):
    pass


class ShapeError(SifError, ValueError):
    pass


class DegenerateInputError(SifError, ValueError):
    pass


class CapacityError(SifError, ValueError):
    pass


class TriggerSpecRejected(SifError, ValueError):
    """Teacher response too short to carry a usable watermark signal."""


class ConsistencyError(SifError, ValueError):
    pass


class CheckpointError(SifError, ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointConsistencyError(CheckpointError):
    pass


class OptimizationDiverged(SifError, ArithmeticError):
    pass


class InvariantViolation(SifError, AssertionError):
    """A runtime contract (feasibility, norm exactness) did not hold."""
