"""Exception hierarchy shared by every stage."""


class QPBurstError(Exception):
    """Base class for all package errors."""


class DomainError(QPBurstError, ValueError):
    """An argument lies outside the domain where the quantity is defined."""


class ConfigError(QPBurstError, ValueError):
    """Inconsistent or out-of-bounds configuration."""


class FormatError(QPBurstError):
    """Malformed trace file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class FitError(QPBurstError, RuntimeError):
    """A least-squares fit failed to converge."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class DegeneracyError(QPBurstError, ValueError):
    """The data cannot resolve the requested parameters."""


class SaturationError(QPBurstError, ValueError):
    """No selection threshold can meet the requested noise target."""


class StageError(QPBurstError, RuntimeError):
    """A pipeline stage failed; wraps the original cause."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
