"""Exception types shared across the package.

The CLI maps these onto process exit codes: config problems exit 2,
data problems exit 3, numerical failures exit 4.
"""


class RiskportError(Exception):
    """Base class for all package errors."""


class ConfigError(RiskportError):
    """Invalid or inconsistent run configuration."""


class DataError(RiskportError):
    """Malformed, missing, or insufficient market data."""


class NumericalError(RiskportError):
    """Numerical failure: NaN/Inf, domain violation, or non-convergence."""
