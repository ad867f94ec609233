"""Exception types shared across the package."""


class OvclipError(Exception):
    pass


class InvalidArgument(OvclipError, ValueError):
    pass


class InvalidConfig(OvclipError, ValueError):
    pass


class NumericFailure(OvclipError, ArithmeticError):
    """A loss or gradient became non-finite."""

    def __init__(self, message: str, *, term: str | None = None, step: int | None = None,
                 alpha: float | None = None):
        super().__init__(message)
        self.term = term
        self.step = step
        self.alpha = alpha


class CheckpointFormatError(OvclipError, ValueError):
    pass


class BadMagic(CheckpointFormatError):
    pass


class TruncatedCheckpoint(CheckpointFormatError):
    pass


class ChecksumMismatch(CheckpointFormatError):
    pass


class CaptionError(OvclipError):
    pass


class BackendUnavailable(CaptionError):
    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class EmptyCompletion(CaptionError):
    pass
