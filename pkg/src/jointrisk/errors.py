"""Exception types shared across the package."""


class DataError(ValueError):
    """Raised when input data violates a documented contract."""


class ConfigError(ValueError):
    """Raised when a run configuration is malformed."""


class ConvergenceError(RuntimeError):
    """Raised when a fit fails its convergence gate."""
