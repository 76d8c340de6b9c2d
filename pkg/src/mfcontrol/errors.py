"""Exception hierarchy shared by every module."""


class MFCError(Exception):
    """Base class for all solver errors."""


class DimensionError(MFCError, ValueError):
    pass


class EmptyMeasureError(MFCError, ValueError):
    pass


class UnsupportedCouplingError(MFCError, ValueError):
    pass


class CheckFailure(MFCError):
    """A sampled certificate failed; ``report`` holds the full check report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class DerivativeMismatch(CheckFailure):
    pass


class ConvexityError(CheckFailure):
    pass


class MonotonicityError(CheckFailure):
    pass


class BlowUpError(MFCError, FloatingPointError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class EvaluationError(MFCError):
    pass


class ModeError(MFCError, ValueError):
    pass


class RegressionError(MFCError, ArithmeticError):
    pass


class StallError(MFCError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class InnerSolveError(MFCError):
    pass


class NonContractionError(MFCError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


class OracleBlowUpError(MFCError, FloatingPointError):
    pass


class ConfigError(MFCError, ValueError):
    pass
