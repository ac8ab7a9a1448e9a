"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class SingularityError(ArithmeticError):
    """A linear block is too close to singular to invert."""

    def __init__(self, det: float):
        super().__init__(f"affine linear block is near-singular (det={det:.3e})")
        self.det = det


class DegenerateInputError(ValueError):
    """Input has nothing to measure (e.g. no visible landmarks, empty split)."""


class FormatError(ValueError):
    """A serialized file is malformed, truncated, or fails its checksum."""


class ConfigError(ValueError):
    """Configuration values are inconsistent."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
