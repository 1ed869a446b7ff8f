"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: parameter/usage problems exit 1,
data problems exit 2, numerical failures exit 3.
"""


class SegAdaptError(Exception):
    """Base class for all package errors."""


class ParameterError(SegAdaptError, ValueError):
    """Invalid configuration value or function argument."""


class ShapeError(SegAdaptError, ValueError):
    """Tensor or array dimensions do not satisfy an operation's contract."""


class DataError(SegAdaptError):
    """Malformed, missing or inconsistent dataset content."""


class NumericalError(SegAdaptError, ArithmeticError):
    """A NaN or Inf was produced by an operation or a training step."""


class CheckpointError(DataError):
    """Base class for checkpoint I/O failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written with an unsupported format version."""


class CheckpointShapeError(CheckpointError):
    """Checkpoint parameter shapes do not match the target network."""
