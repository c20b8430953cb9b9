"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class NeumatError(Exception):
    exit_code = 2

    def __init__(self, message, **context):
        super().__init__(message)
        self.message = message
        self.context = context


class ArgumentError(NeumatError, ValueError):
    """Bad argument value (empty range, zero segments, empty dataset...)."""


class DomainError(NeumatError, ValueError):
    """Input outside the mathematical domain, e.g. a range straddling a pole."""


class StructuralError(NeumatError, ValueError):
    """Graph or plan shapes that do not line up."""


class CapacityError(NeumatError):
    """A configured budget (segments, buffers) was exceeded."""


class InfeasibleError(NeumatError):
    """No blocking configuration satisfies the accelerator constraints."""


class NumericalError(NeumatError, ArithmeticError):
    exit_code = 3
