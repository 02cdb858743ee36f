from typing import Dict
from typing import Optional


class ScarfError(Exception):
    """Base class of every error raised by pyscarf."""


class ShapeError(ScarfError):
    def __init__(self, message, *dims) -> None:
        super().__init__(message)
        self.message = message
        self.dims = dims


class ArgumentError(ScarfError, ValueError):
    pass


class ConfigError(ScarfError, ValueError):
    def __init__(self, message, keys=None) -> None:
        super().__init__(message)
        self.message = message
        self.keys = keys or []


class ConsistencyError(ScarfError):
    pass


class GradientError(ScarfError):
    pass


class NumericalError(ScarfError):
    def __init__(
        self,
        message,
        iteration: int,
        lr: float,
        components: Optional[Dict[str, float]] = None,
    ) -> None:
        super().__init__(
            f"{message} (iteration={iteration}, lr={lr}, components={components})"
        )
        self.message = message
        self.iteration = iteration
        self.lr = lr
        self.components = components or {}


class CheckpointError(ScarfError):
    def __init__(self, message, path=None) -> None:
        super().__init__(message)
        self.message = message
        self.path = path


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass
