"""Exception hierarchy shared by all modules.

The CLI maps the three families below onto process exit codes:
``ValidationError`` -> 2, ``DependencyError`` -> 3, ``NumericalError`` -> 4.
"""


class SpdynError(Exception):
    pass


class ValidationError(SpdynError, ValueError):
    """Bad input data, bad configuration or a violated precondition."""


class ShapeError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class ContractError(ValidationError):
    pass


class InsufficientDataError(ValidationError):
    pass


class AlignmentError(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DependencyError(SpdynError):
    """A pipeline stage was started before the artifacts it needs exist."""


class NumericalError(SpdynError, ArithmeticError):
    pass


class NonFiniteGradientError(NumericalError):
    pass


class NonFiniteLossError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message, kkt_violation=None):
        super().__init__(message)
        self.kkt_violation = kkt_violation
