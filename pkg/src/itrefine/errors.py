"""Exception types raised across the package."""


class RefineError(Exception):
    """Base class for all package errors."""


class ConfigError(RefineError, ValueError):
    """Invalid configuration, dataset, or precondition."""


class GridError(ConfigError):
    """Array length is not a valid grid size or does not match the grid."""


class ConjugateSymmetryError(RefineError):
    """Inverse transform of a spectrum that does not come from a real field."""


class DivergenceError(RefineError, FloatingPointError):
    """Iteration produced non-finite or runaway values.

    ``step`` is the index of the offending iterate; ``trajectory`` holds
    whatever was recorded before the blow-up (may be None).
    """

    def __init__(self, message, step=None, trajectory=None):
        super().__init__(message)
        self.step = step
        self.trajectory = trajectory


class ConvergenceError(RefineError):
    """Power iteration did not reach tolerance; carries the last estimate."""

    def __init__(self, message, estimate=None):
        super().__init__(message)
        self.estimate = estimate


class NoInvariantBallError(RefineError, ValueError):
    """Bias is too large for any forward-invariant ball to exist."""


class InsufficientDataError(RefineError, ValueError):
    pass


class UndefinedCorrelationError(RefineError, ValueError):
    pass
