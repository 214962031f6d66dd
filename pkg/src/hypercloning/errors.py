"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with arguments that violate its preconditions."""


class ConvergenceError(ArithmeticError):
    """An iterative routine hit its iteration cap.

    ``estimate`` carries the best result available when iteration stopped.
    """

    def __init__(self, message, estimate=None):
        super().__init__(message)
        self.estimate = estimate


class StrategyInapplicableError(ValueError):
    """The requested expansion strategy cannot be applied to this tensor."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, step=None, checkpoint=None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


class CheckpointError(Exception):
    """Base class for checkpoint format problems."""


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass
