class ConfigError(ValueError):
    """Invalid configuration or unresolvable experiment input (CLI exit code 2)."""


class ContractError(ValueError):
    """A call violated an operation's preconditions."""


class DegenerateFitError(ValueError):
    """No data and no smoothing: the fitted table would be undefined."""


class InsufficientDataError(ValueError):
    pass


class NumericalError(RuntimeError):
    """Non-finite values mid-run (CLI exit code 3)."""
