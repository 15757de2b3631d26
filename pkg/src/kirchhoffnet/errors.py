"""Exception types raised across the package."""


class KirchhoffError(Exception):
    """Base class for all package errors."""


class InvalidArgument(KirchhoffError, ValueError):
    pass


class UnsupportedDevice(KirchhoffError, ValueError):
    pass


class NumericError(KirchhoffError, ArithmeticError):
    """Non-finite value encountered; ``step`` is the offending step index when known."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class DivergenceError(NumericError):
    pass


class ParseError(KirchhoffError, ValueError):
    pass


class VersionError(ParseError):
    pass


class ConfigError(KirchhoffError, ValueError):
    """Invalid experiment configuration; ``key`` names the offending field."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class DomainError(KirchhoffError, ValueError):
    """A function was evaluated outside its domain (e.g. log of a non-positive density)."""
