"""Exception taxonomy shared by all tmknet modules.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericalError -> 3.
"""


class TmknetError(Exception):
    """Base class for all tmknet errors."""


class ConfigError(TmknetError):
    """Invalid configuration or usage (bad flag, inconsistent settings)."""


class DataError(TmknetError):
    """Malformed, truncated or otherwise unusable data."""


class NumericalError(TmknetError):
    """Numerical failure: NaN/Inf, eigensolver breakdown, rank loss."""
