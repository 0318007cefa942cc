from typing import Any


class DimensionError(ValueError):
    """A matrix or vector has the wrong shape."""


class MatrixRangeError(ValueError):
    """A matrix function cannot be evaluated in floating point."""


class SingularMatrixError(ValueError):
    """A linear system has no unique solution.

    Attributes:
      pivot: 0-based index of the first vanishing pivot.
    """

    def __init__(self, message: str, pivot: int):
        super().__init__(f"{message} (pivot {pivot})")
        self.pivot = pivot


class PreconditionError(ValueError):
    """An operation was called outside of its domain."""


class UnsupportedError(ValueError):
    """A stage count or order is not implemented."""


class CertificateError(ValueError):
    """A vector-field class certificate cannot be used."""


class UsageError(ValueError):
    """A problem, method or config key does not resolve."""


class DivergenceError(RuntimeError):
    """A fixed-point iterate left the finite range.

    Attributes:
      stage: 0-based index of the first offending stage.
      iteration: The iteration at which divergence was detected.
    """

    def __init__(self, stage: int, iteration: int):
        super().__init__(
            f"Fixed-point iteration diverged in stage {stage} "
            f"at iteration {iteration}"
        )
        self.stage = stage
        self.iteration = iteration


class ReferenceUnreliableError(RuntimeError):
    """Two refinements of a reference solution disagree.

    Attributes:
      difference: Relative difference between the two refinements.
    """

    def __init__(self, difference: float, tolerance: float):
        super().__init__(
            f"Reference refinements differ by {difference:.3e} "
            f"(tolerance {tolerance:.1e})"
        )
        self.difference = difference


class IntegrationError(RuntimeError):
    """A trajectory could not be completed.

    Attributes:
      partial: The trajectory up to the last accepted step.
      step: 0-based index of the failed step.
    """

    def __init__(self, message: str, partial: Any, step: int):
        super().__init__(f"{message} (step {step})")
        self.partial = partial
        self.step = step
