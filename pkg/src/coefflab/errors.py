class CoeffLabError(Exception):
    """Base class for library errors."""


class DimensionError(CoeffLabError, ValueError):
    pass


class ArityError(DimensionError):
    """Raised when head counts disagree between paired inputs."""


class NumericError(CoeffLabError, ArithmeticError):
    pass


class UsageError(CoeffLabError, RuntimeError):
    pass


class TrainingError(CoeffLabError, RuntimeError):
    """Raised when a training loss stops being finite."""

    def __init__(self, step, loss):
        super().__init__(f"loss became non-finite ({loss!r}) at step {step}")
        self.step = step
        self.loss = loss
