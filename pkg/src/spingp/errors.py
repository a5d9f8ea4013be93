"""Exception types raised across the package."""
import numpy as np


class NotPositiveDefinite(np.linalg.LinAlgError):
    """A pivot block failed its Cholesky factorization.

    ``block`` is the index of the offending diagonal block (in the original
    block ordering). Upstream this usually means the hyperparameters are
    infeasible.
    """

    def __init__(self, block, message=None):
        self.block = int(block)
        super().__init__(message or f"pivot block {block} is not positive definite")


class SingularProcessNoise(NotPositiveDefinite):
    """A process-noise block is not positive definite even after jitter."""

    def __init__(self, block):
        super().__init__(block, f"process-noise covariance of block {block} is singular after jitter")


class DimensionMismatch(ValueError):
    pass


class DuplicateTimestamps(ValueError):
    pass


class NegativeVariance(ArithmeticError):
    pass


class InfeasibleStart(ValueError):
    pass


class NoValidRows(ValueError):
    pass
