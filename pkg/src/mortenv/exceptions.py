"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input data or configuration does not satisfy a documented contract."""


class NumericalError(RuntimeError):
    """A numerical procedure failed (divergence, NaN loss, ...)."""


class ConvergenceError(NumericalError):
    """An iterative solver stopped before reaching its tolerance.

    The last iterate is kept on ``last_iterate`` so callers can inspect it.
    """

    def __init__(self, message, last_iterate=None, history=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.history = history if history is not None else []
