"""Exception types shared across the package."""


class SegZipError(Exception):
    """Base class for all package errors."""


class DomainError(SegZipError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class StructuralError(SegZipError, ValueError):
    """Dimensions or layouts do not agree with the model specification."""


class EvaluationError(SegZipError, ArithmeticError):
    """A likelihood evaluation produced a non-finite value.

    ``index`` identifies the offending observation (cluster, position) or
    block when it is known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class InitializationError(SegZipError, RuntimeError):
    """The objective cannot be evaluated at the starting point."""


class ParseError(SegZipError, ValueError):
    """Malformed input file or configuration; ``row`` is 1-based when set."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row
