"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericalError -> 3.
"""


class ConfigError(ValueError):
    """Bad configuration: unknown key, unparsable value, invalid combination."""


class DataError(ValueError):
    """Bad input data: malformed file, inconsistent ids, impossible request."""


class NumericalError(ArithmeticError):
    """Numerical failure: non-finite loss or gradient, failed gradient check."""
