class SplatStyleError(Exception):
    """Base class for every error raised by this package."""


class UsageError(SplatStyleError, ValueError):
    """A call violated a precondition (bad shape, missing state, out-of-range argument)."""


class InvalidParameterError(UsageError):
    pass


class DegenerateCovarianceError(SplatStyleError, ArithmeticError):
    pass


class TrainingFailureError(SplatStyleError, RuntimeError):
    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class DatasetError(SplatStyleError):
    pass


class CheckpointError(SplatStyleError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass
