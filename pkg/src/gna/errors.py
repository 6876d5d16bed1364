"""Exception types shared across the package."""


class GnaError(Exception):
    """Base class for all package errors."""


class ShapeError(GnaError, ValueError):
    pass


class ContractError(GnaError, ValueError):
    pass


class EmptyKeysError(GnaError, ValueError):
    pass


class FormatError(GnaError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(GnaError, ValueError):
    pass


class IoError(GnaError, OSError):
    pass


class DivergenceError(GnaError, RuntimeError):
    pass
