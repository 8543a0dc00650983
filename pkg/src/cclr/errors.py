"""Exception hierarchy. The CLI maps each class onto an exit code."""


class CCLRError(Exception):
    exit_code = 1


class ConfigError(CCLRError, ValueError):
    """Invalid configuration value or combination."""

    exit_code = 2


class ArgumentError(CCLRError, ValueError):
    """Array shapes or call arguments that do not fit together."""

    exit_code = 2


class DataError(CCLRError):
    """Unreadable, truncated or mis-shaped input data."""

    exit_code = 3


class DivergenceError(CCLRError, FloatingPointError):
    """Training or scoring produced a non-finite value."""

    exit_code = 4
