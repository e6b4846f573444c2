"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 2 for validation
problems, 3 for data problems, 4 for numeric faults.
"""


class ParaforgeError(Exception):
    exit_code = 1


class ConfigError(ParaforgeError, ValueError):
    exit_code = 2


class ShapeError(ParaforgeError, ValueError):
    exit_code = 2


class DataError(ParaforgeError):
    exit_code = 3


class FormatError(DataError):
    """Malformed container or file header."""


class UnsupportedFormatError(FormatError):
    """Well-formed file whose encoding we do not handle."""


class IntegrityError(DataError):
    """Corrupt, truncated or incomplete serialized artifact."""


class EmptyInputError(DataError, ValueError):
    pass


class DegenerateInputError(DataError, ValueError):
    """Input for which the requested quantity is undefined (zero variance, empty class...)."""


class NumericFaultError(ParaforgeError, FloatingPointError):
    exit_code = 4


class ConvergenceWarning(UserWarning):
    pass
