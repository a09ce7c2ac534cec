"""Exception hierarchy shared by the package."""


class LpdfmError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(LpdfmError, ValueError):
    """An argument lies outside the domain of the operation."""


class ParseError(LpdfmError, ValueError):
    """Malformed input file."""


class NumericError(LpdfmError, ArithmeticError):
    """A computation produced a non-finite or otherwise unusable value."""

    def __init__(self, message, **context):
        if context:
            detail = ", ".join(f"{k}={v!r}" for k, v in context.items())
            message = f"{message} ({detail})"
        super().__init__(message)
        self.context = context


class ConfigError(LpdfmError, ValueError):
    """Invalid or unknown configuration."""
