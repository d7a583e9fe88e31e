"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ``InputError`` -> 2, ``NumericError`` -> 3.
"""


class EstgcnError(Exception):
    """Base class for all toolkit errors."""


class InputError(EstgcnError, ValueError):
    """Malformed or out-of-range input data, shapes or arguments."""


class ConfigError(InputError):
    """Inconsistent configuration (e.g. a station without a GP fit when beta2 > 0)."""


class NumericError(EstgcnError, ArithmeticError):
    """Non-finite values, non-convergence or optimizer divergence."""


class FitError(EstgcnError):
    """A statistical fit could not be carried out (too few exceedances, etc.)."""

    def __init__(self, message, count=None):
        super().__init__(message)
        self.count = count


class OptimizerDivergence(NumericError):
    """Raised by the BFGS routine; carries the last iterate."""

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate
