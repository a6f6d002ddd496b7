"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or mutually inconsistent configuration."""


class ShapeError(ValueError):
    """Array shapes do not satisfy an operation's contract."""


class NumericError(RuntimeError):
    """Non-finite values appeared during a computation."""


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt, truncated or of the wrong version."""


class DatasetError(RuntimeError):
    """Dataset directory is incomplete or inconsistent.

    ``missing`` lists the ids whose counterpart files could not be found.
    """

    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = list(missing)
