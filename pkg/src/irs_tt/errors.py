"""Exception types shared across the package."""


class IrsTTError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(IrsTTError, ValueError):
    pass


class RankOutOfRange(IrsTTError, ValueError):
    pass


class NumericalFailure(IrsTTError, ArithmeticError):
    pass


class ConfigError(IrsTTError, ValueError):
    pass


class Diverged(IrsTTError, ArithmeticError):
    """Raised when a gradient solver's loss blows up past the guard threshold."""

    def __init__(self, message, loss_trace=None):
        super().__init__(message)
        self.loss_trace = loss_trace


class NonPositiveInput(IrsTTError, ValueError):
    pass


class ParseError(IrsTTError, ValueError):
    def __init__(self, message, line=None, key=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)
        self.line = line
        self.key = key


class ValidationError(IrsTTError, ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
