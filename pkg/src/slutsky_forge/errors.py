"""Exception hierarchy.

Every error carries a CLI exit code so the command layer can map failures
without inspecting messages.
"""


class ForgeError(Exception):
    exit_code = 3


class ConfigurationError(ForgeError, ValueError):
    exit_code = 2


class DomainError(ConfigurationError):
    """A price-income point lies outside the family's box."""


class ParseError(ConfigurationError):
    pass


class UnsupportedError(ForgeError):
    """The requested oracle or feature is not available for this family."""

    exit_code = 2


class NumericError(ForgeError, ArithmeticError):
    exit_code = 3


class CompatibilityError(NumericError):
    """Neumann data with a non-negligible mean (mass is not conserved)."""


class RegularityError(NumericError):
    """Density falls below the positivity floor inside the support."""


class IntegrationError(NumericError):
    pass


class InconsistencyError(NumericError):
    """Monte Carlo estimate contradicts an exact identity beyond its noise."""


class CheckFailed(ForgeError):
    exit_code = 1
