"""Exception hierarchy shared by all neurocert modules."""


class NeurocertError(Exception):
    """Base class for every error raised by this package."""


# --- expressions -----------------------------------------------------------

class ExprError(NeurocertError):
    pass


class ExprSyntaxError(ExprError):
    def __init__(self, position, message):
        self.position = position
        self.message = message
        super().__init__(f"at column {position + 1}: {message}")


class UnknownIdentifier(ExprError):
    pass


class IndexOutOfRange(ExprError):
    pass


class NonDifferentiableNode(ExprError):
    pass


class UnsupportedNode(ExprError):
    """Raised by the SMT-LIB exporter for nodes the chosen mode cannot express."""


# --- evaluation ------------------------------------------------------------

class EvaluationError(NeurocertError):
    pass


class DivisionNearZero(EvaluationError):
    pass


class NonFiniteResult(EvaluationError):
    pass


class IntervalError(NeurocertError):
    pass


class IntervalDivisionByZero(IntervalError):
    pass


class NonFiniteBound(IntervalError):
    pass


class ReluNotSupported(NeurocertError):
    pass


# --- problems --------------------------------------------------------------

class MalformedProblem(NeurocertError):
    """A problem description violates one or more invariants.

    ``diagnostics`` is a list of ``(field_path, message)`` pairs.
    """

    def __init__(self, diagnostics):
        if isinstance(diagnostics, str):
            diagnostics = [("", diagnostics)]
        self.diagnostics = list(diagnostics)
        lines = [f"{path}: {msg}" if path else msg for path, msg in self.diagnostics]
        super().__init__("; ".join(lines))


class SpecSystemMismatch(NeurocertError):
    pass


class PointOutsideRegion(NeurocertError):
    pass


class EmptySetSuspected(NeurocertError):
    pass


class DivergenceDetected(NeurocertError):
    pass


class SmtSyntaxError(NeurocertError):
    pass
