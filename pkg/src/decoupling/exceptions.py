"""Exception types shared across the package."""


class DecouplingError(Exception):
    """Base class for all package errors."""


class ValidationError(DecouplingError, ValueError):
    """Invalid input: bad sequence timings, infeasible pulse packing, malformed files."""


class ConvergenceError(DecouplingError, RuntimeError):
    """A numerical procedure failed to converge.

    Attributes
    ----------
    residual : float
        Final residual norm (or error estimate) when the procedure gave up.
    """

    def __init__(self, message, residual=float("nan")):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class QuadratureError(ConvergenceError):
    """Adaptive quadrature did not reach its tolerance."""
