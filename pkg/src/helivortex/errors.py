"""Exception hierarchy shared by all modules."""


class HelivortexError(Exception):
    """Base class for package errors."""


class InvalidSpec(HelivortexError, ValueError):
    pass


class EmptyInput(HelivortexError, ValueError):
    pass


class NonpositivePitch(HelivortexError, ValueError):
    pass


class NonpositiveWeight(HelivortexError, ValueError):
    pass


class NonpositiveTrace(HelivortexError, ValueError):
    pass


class NonpositiveResult(HelivortexError, RuntimeError):
    """Discrete harmonic weight lost positivity (mesh too poor)."""


class MeshMismatch(HelivortexError, ValueError):
    pass


class SolverBreakdown(HelivortexError, RuntimeError):
    """Linear solver failed; ``trace`` holds the residual history."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class NotProjectable(HelivortexError, ValueError):
    pass


class CenterOutsideDomain(HelivortexError, ValueError):
    pass


class CollapseToZero(HelivortexError, RuntimeError):
    pass


class MaxIterations(HelivortexError, RuntimeError):
    pass


class EmptyCore(HelivortexError, ValueError):
    pass


class InsufficientData(HelivortexError, ValueError):
    pass


class ConfigParse(HelivortexError, ValueError):
    pass


class SolveFailure(HelivortexError, RuntimeError):
    def __init__(self, message, eps=None):
        super().__init__(message)
        self.eps = eps
