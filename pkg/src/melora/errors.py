"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DivisibilityError(ValueError):
    """A feature dimension is not divisible by the number of mini adapters."""


class SvdConvergenceError(RuntimeError):
    def __init__(self, sweeps: int, off_norm: float):
        super().__init__(
            f"one-sided Jacobi SVD did not converge after {sweeps} sweeps "
            f"(largest relative off-diagonal Gram entry {off_norm:.3e})"
        )
        self.sweeps = sweeps
        self.off_norm = off_norm


class DivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class CheckpointFormatError(ValueError):
    """A checkpoint file is truncated or not in the MELR format."""
