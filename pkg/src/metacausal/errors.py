"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid user-supplied configuration (bad sizes, missing methods, ...)."""


class DomainError(ValueError):
    """Arguments outside an operation's mathematical domain."""


class NumericalError(RuntimeError):
    """Non-finite losses or gradients that survived retries."""
