"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class TauPmpError(Exception):
    """Base class for every error raised by this package."""


class NonFiniteValue(TauPmpError, ArithmeticError):
    pass


class DomainError(TauPmpError, ValueError):
    pass


class DslSyntaxError(TauPmpError, ValueError):
    """Parse failure with a 0-based column."""

    def __init__(self, position: int, message: str):
        self.position = position
        self.message = message
        super().__init__(f"syntax error at position {position}: {message}")


class UnknownIdentifier(DslSyntaxError):
    pass


class ArityError(DslSyntaxError):
    pass


class UnknownExample(TauPmpError, KeyError):
    pass


class InvalidParams(TauPmpError, ValueError):
    pass


class StepSizeUnderflow(TauPmpError, RuntimeError):
    pass


class IndexOutOfRange(TauPmpError, IndexError):
    pass


class InsufficientData(TauPmpError, ValueError):
    pass


class VerdictMismatch(TauPmpError, ValueError):
    pass


class UnboundedSet(TauPmpError, ValueError):
    pass


class GridMismatch(TauPmpError, ValueError):
    pass


class NoBracket(TauPmpError, ValueError):
    pass


class MaxIterations(TauPmpError, RuntimeError):
    pass


class PathBlowup(TauPmpError, RuntimeError):
    pass
