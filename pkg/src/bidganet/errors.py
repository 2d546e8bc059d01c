"""Exception types shared across the package.

The CLI maps each family to an exit code, so new errors should subclass one
of these rather than raising bare ``ValueError``.
"""


class BidgError(Exception):
    """Base class for all package errors."""


class ShapeError(BidgError, ValueError):
    """Incompatible tensor shapes or spatial sizes."""


class NumericError(BidgError, FloatingPointError):
    """NaN or otherwise unusable values reached an op boundary."""


class GraphError(BidgError, RuntimeError):
    """Misuse of the gradient tape (detached loss, double backward, ...)."""


class ConfigError(BidgError, ValueError):
    """Invalid configuration document or build parameters."""


class DataError(BidgError, ValueError):
    """Malformed dataset files or label values."""


class NumericAbort(NumericError):
    """Training produced a non-finite loss.

    Attributes:
        iteration: index of the step that produced the bad loss.
    """

    def __init__(self, iteration: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss
