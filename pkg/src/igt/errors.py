"""Exception types shared across the package."""


class IgtError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(IgtError, ValueError):
    """Operand dimensions are incompatible for the requested operation."""


class DomainError(IgtError, ValueError):
    """An input value lies outside the mathematical domain of an operation."""


class ConfigError(IgtError, ValueError):
    """A configuration value violates a documented contract."""


class UsageError(IgtError, RuntimeError):
    """An API was called in a way its contract forbids."""


class ParseError(IgtError, ValueError):
    """A file could not be parsed.

    Carries the 1-based line number when the failure is tied to a line.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
