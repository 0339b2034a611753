"""Shared exception types."""


class QuadratureConvergenceError(RuntimeError):
    """Adaptive quadrature failed to converge within the refinement budget."""

    def __init__(self, message, last_estimate=None, gap=None):
        super().__init__(message)
        self.last_estimate = last_estimate
        self.gap = gap


class RareEventUnderflow(RuntimeError):
    """Selection probability underflowed the representable range."""


class SolverConvergenceError(RuntimeError):
    """Iterative solver exhausted its sweep budget."""


class NumericError(RuntimeError):
    """Matrix factorization or related numeric failure."""


class InvariantViolation(RuntimeError):
    """A mathematical invariant that should always hold was violated."""
