"""Exception types shared across the package."""


class ScadcError(Exception):
    """Base class for every error raised by this package."""


class ArgumentError(ScadcError, ValueError):
    """An argument violates an operation's preconditions."""


class DimensionError(ArgumentError):
    """Array or map dimensions are incompatible."""


class FormatError(ScadcError, ValueError):
    """A file decoded fine but is not in the expected layout."""


class CodecError(ScadcError, ValueError):
    """Bytes could not be decoded at all."""


class RangeError(ArgumentError):
    """A value falls outside what a storage format can represent."""


class NonFiniteError(ScadcError, ArithmeticError):
    """A forward or backward pass produced NaN or Inf."""


class GraphError(ScadcError, RuntimeError):
    """Misuse of the autodiff tape, e.g. a second backward on a freed graph."""


class TrainingError(ScadcError, RuntimeError):
    """Training diverged. ``iteration`` names the failing step."""

    def __init__(self, message, iteration):
        super().__init__(message)
        self.iteration = iteration
