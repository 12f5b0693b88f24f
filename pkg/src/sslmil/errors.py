"""Exception types shared across the package.

CLI exit codes: 1 usage error, 2 numerical failure, 3 I/O error.
"""


class InvalidParameterError(ValueError):
    """A hyperparameter or argument violates its precondition."""


class ShapeMismatchError(ValueError):
    """Array dimensions do not chain."""


class DegenerateInputError(ValueError):
    """Numerically degenerate input (near-zero norm, empty class, ...)."""


class TrainingDivergenceError(RuntimeError):
    """NaN/Inf encountered in a loss or gradient during training."""


class DataFormatError(RuntimeError):
    """A dataset or checkpoint file is missing or malformed."""
