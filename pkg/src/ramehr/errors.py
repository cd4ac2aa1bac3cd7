"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, bad input data
exits 2, numeric or runtime failures exit 3.
"""


class RamEhrError(Exception):
    exit_code = 3


class ConfigError(RamEhrError, ValueError):
    exit_code = 1


class DataError(RamEhrError, ValueError):
    """Malformed or inconsistent input data (carries file/line context in the message)."""

    exit_code = 2


class ShapeError(RamEhrError, ValueError):
    exit_code = 3


class NumericError(RamEhrError, FloatingPointError):
    exit_code = 3


class SummarizerError(RamEhrError, RuntimeError):
    exit_code = 3
