"""Exception types shared across the package."""


class DeepzError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(DeepzError, ValueError):
    """Array shapes are inconsistent with an operation's contract."""


class NonFiniteError(DeepzError, ArithmeticError):
    """NaN or Inf encountered where finite values are required."""


class DegenerateInputError(DeepzError, ValueError):
    """Input carries no usable signal (constant image, empty mask, ...)."""


class FitError(DeepzError, RuntimeError):
    """A least-squares fit failed to converge."""


class TrainingDivergedError(DeepzError, RuntimeError):
    """Training loss went non-finite or exploded."""
