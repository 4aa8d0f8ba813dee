"""Exception hierarchy shared by every module.

The CLI maps :class:`InputError` to exit code 2 and :class:`NumericalError`
to exit code 3.
"""


class OpenKPZError(Exception):
    """Base class for all package errors."""


class InputError(OpenKPZError, ValueError):
    """Invalid argument, configuration or file content."""


class NumericalError(OpenKPZError, ArithmeticError):
    """A computation produced a non-finite or otherwise unusable result."""


class CalibrationError(NumericalError):
    """A sampler could not be calibrated (for example, too small an ESS)."""
