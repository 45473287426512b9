"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage/config problems -> 1,
numeric failures -> 2, property-suite failures -> 3.
"""


class ShapeError(ValueError):
    """Operand shapes or dtypes are incompatible with the operation."""


class ConfigError(ValueError):
    """A configuration value violates its documented constraint."""


class DataError(ValueError):
    """Input data is out of the documented domain (e.g. bad target id)."""


class UsageError(RuntimeError):
    """An API was called in a way its contract forbids."""


class NumericError(ArithmeticError):
    """A numeric invariant broke mid-computation (NaN/Inf, divergence)."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class SingularMatrixError(NumericError):
    """Matrix inversion attempted on a (near-)singular matrix."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class PropertyFailure(AssertionError):
    """A verification suite property did not hold."""
