"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An argument is outside its documented domain."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A NaN/Inf appeared where a finite value is required."""


class UnsupportedMaskError(ValueError):
    """A mask cannot be executed by the banded kernel (non-contiguous rows)."""


class StateError(RuntimeError):
    """Saved forward state is missing or does not match the request."""


class CorpusError(OSError):
    """The training corpus is missing or too small."""


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""
