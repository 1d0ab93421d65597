"""Exception types shared across the package."""


class FusionDetectError(Exception):
    """Base class for all package errors."""


class DimensionError(FusionDetectError, ValueError):
    """Tensor or box shapes do not line up."""


class ContractError(FusionDetectError, ValueError):
    """A precondition of an operation was violated."""


class ValidationError(FusionDetectError, ValueError):
    """Input data (manifest, config, checkpoint) failed validation."""


class GenerationError(FusionDetectError, RuntimeError):
    """The synthetic scene generator could not satisfy its constraints."""


class UndefinedMetricError(FusionDetectError, ArithmeticError):
    """A rate was requested whose denominator is zero."""


class NumericError(FusionDetectError, FloatingPointError):
    """Training produced a non-finite value."""


class CheckpointError(ValidationError):
    """A checkpoint file is missing, corrupt or of an unknown format version."""
