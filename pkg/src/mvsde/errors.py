"""Exception types shared across the toolkit.

The split mirrors how callers are expected to react: DomainError means the
mathematical preconditions fail (e.g. a covariance that is not positive
definite), UsageError means the call itself is malformed, ResourceError means
a cost guard tripped, NumericError means the computation blew up mid-flight.
"""


class DomainError(ValueError):
    """Input violates a mathematical precondition (non-PD matrix, bad exponent)."""


class UsageError(ValueError):
    """Malformed call: mismatched grids, missing callbacks, bad configuration."""


class ResourceError(RuntimeError):
    """A cost guard (memory, evaluation count, problem size) was exceeded."""


class NumericError(ArithmeticError):
    """The computation produced NaN/Inf or otherwise diverged."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class RangeError(OverflowError):
    """Result is beyond the representable floating-point range."""


class ConvergenceError(RuntimeError):
    """An iteration failed to converge; carries the diagnostic history."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history if history is not None else []
