"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code (see cli.py).
"""


class CosamError(Exception):
    """Base class for all package errors."""


class ConfigError(CosamError):
    """Invalid configuration: bad hyper-parameter, preset, or architecture."""

    exit_code = 2


class InputError(CosamError, ValueError):
    """Invalid runtime input: shape mismatch, out-of-bounds coordinate, etc."""

    exit_code = 2


class DataError(CosamError):
    """Dataset loading or layout problem; message names the offending file."""

    exit_code = 3


class NumericError(CosamError):
    """Numerical failure (NaN/Inf loss); message names the training phase."""

    exit_code = 4
