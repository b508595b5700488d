"""Exception types shared across the package."""


class DeqError(Exception):
    """Base class for all package errors."""


class DimensionError(DeqError, ValueError):
    """Operand shapes do not conform."""


class NumericError(DeqError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class ContractError(DeqError, ValueError):
    """A call violated an operation's preconditions."""


class DivergenceError(NumericError):
    """A fixed-point solve produced a non-finite state."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class ConfigError(DeqError, ValueError):
    """Invalid or incomplete experiment configuration."""


class TrainingAborted(DeqError, RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, epoch=None, batch=None, loss_trace=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.loss_trace = list(loss_trace or [])


class CheckpointError(DeqError, IOError):
    """A checkpoint file could not be read back."""


class BadMagicError(CheckpointError):
    """The file does not start with the checkpoint magic bytes."""


class TruncatedCheckpointError(CheckpointError):
    """The file ended before all declared content was read."""


class VersionMismatchError(CheckpointError):
    """The file was written with an unsupported format version."""

    def __init__(self, found, expected):
        super().__init__(f"checkpoint format version {found}, expected {expected}")
        self.found = found
        self.expected = expected
