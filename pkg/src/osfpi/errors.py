"""Exception types shared across the package."""


class DimensionMismatch(ValueError):
    """Input geometry is incompatible with an operation (size, divisibility, channels)."""


class SplitPointError(ValueError):
    """Merged token sequence length does not match the declared UAV/satellite split."""


class InvalidArgument(ValueError):
    """Argument outside an operation's documented domain."""


class OutOfBounds(ValueError):
    """Requested region falls outside the world map."""


class IdMismatch(ValueError):
    """Prediction and label sample ids do not line up."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss encountered during training."""
