"""Exception hierarchy shared across the package."""


class HesrnError(Exception):
    """Base class for all package errors."""


class ShapeError(HesrnError, ValueError):
    """Incompatible tensor extents."""


class RankError(HesrnError, ValueError):
    """Tensor rank outside what an operation accepts."""


class NumericError(HesrnError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class DeterminismError(HesrnError, RuntimeError):
    """A closure returned different values for identical inputs."""


class ParameterError(HesrnError, ValueError):
    """Hyperparameter or argument outside its admissible range."""


class ValidationError(HesrnError, ValueError):
    """Data violates a structural invariant."""


class ParseError(HesrnError, ValueError):
    """Malformed file content."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DivergenceError(HesrnError, RuntimeError):
    """Training produced a non-finite loss."""


class ConfigError(HesrnError, ValueError):
    """Invalid or unknown configuration entry."""
