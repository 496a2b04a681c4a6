"""Exception hierarchy shared by all analysis modules."""


class QkdError(Exception):
    """Base class. ``exit_code`` is used by the command-line front end."""

    exit_code = 1


class ParseError(QkdError, ValueError):
    exit_code = 3

    def __init__(self, message: str, offset: int | None = None, unit: str = "byte"):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at {unit} {offset})"
        super().__init__(message)


class ValidationError(QkdError, ValueError):
    exit_code = 4


class ConfigurationError(QkdError, ValueError):
    exit_code = 5


class InsufficientDataError(QkdError):
    exit_code = 6


class UndefinedValueError(QkdError, ArithmeticError):
    """A ratio estimator has an empty denominator (e.g. no side-peak counts)."""

    exit_code = 7


class NoKeyError(QkdError):
    """No positive secret key rate exists, even at zero channel loss."""

    exit_code = 8
