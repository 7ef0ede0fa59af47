class VDDError(Exception):
    """Base class for package errors."""


class ConfigError(VDDError, ValueError):
    pass


class NonFiniteError(VDDError, FloatingPointError):
    """A numerical routine produced NaN or inf.

    ``where`` names the step, state index or term that failed so training
    logs can point at it.
    """

    def __init__(self, message: str, where: dict | None = None):
        super().__init__(message)
        self.where = dict(where or {})


class CheckpointVersionError(VDDError, ValueError):
    pass


class UnsupportedOperation(VDDError, TypeError):
    pass
