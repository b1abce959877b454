"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class MoreError(Exception):
    exit_code = 1


class ConfigError(MoreError, ValueError):
    exit_code = 1


class ShapeError(MoreError, ValueError):
    exit_code = 2


class DataError(MoreError, ValueError):
    exit_code = 2


class ParseError(DataError):
    pass


class SchemaError(DataError):
    pass


class ContractError(MoreError, RuntimeError):
    exit_code = 1


class NumericalError(MoreError, ArithmeticError):
    """Raised when a computation produces non-finite values.

    ``diagnostic`` holds whatever state the raiser could snapshot (step
    counter, loss components, finite-difference step, ...).
    """

    exit_code = 3

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = dict(diagnostic or {})
