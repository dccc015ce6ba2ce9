"""Exception types shared across the package."""


class IMDNetError(Exception):
    """Base class for all package errors."""


class ShapeError(IMDNetError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ConfigError(IMDNetError, ValueError):
    """A configuration value is invalid or inconsistent."""


class RangeError(IMDNetError, ValueError):
    """A scalar parameter lies outside its declared range."""


class NonFiniteLossError(IMDNetError, RuntimeError):
    """Training produced a NaN/Inf loss; carries a diagnostic payload."""

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}
