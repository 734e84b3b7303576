"""Exception types raised across the engine."""


class DeepWriterError(Exception):
    """Base class for all engine errors."""


class ShapeError(DeepWriterError, ValueError):
    """Tensor dimensions do not fit an operation."""


class DomainError(DeepWriterError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class TrainingDiverged(DeepWriterError, FloatingPointError):
    """Loss became non-finite during training."""

    def __init__(self, iteration: int, loss: float):
        super().__init__(f"training diverged at iteration {iteration}: loss={loss}")
        self.iteration = iteration
        self.loss = loss


class TransferError(DeepWriterError, ValueError):
    """Source parameters cannot be transferred into a target network."""

    def __init__(self, mismatched: list):
        super().__init__("incompatible layers: " + ", ".join(mismatched))
        self.mismatched = list(mismatched)


class CheckpointError(DeepWriterError, IOError):
    """A checkpoint file is corrupt, truncated, or incompatible."""


class IncompatibleCheckpoint(CheckpointError):
    """Version or architecture fingerprint mismatch."""


class CorruptCheckpoint(CheckpointError):
    """Truncated payload or failed CRC."""
