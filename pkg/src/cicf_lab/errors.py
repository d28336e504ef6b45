"""Exception hierarchy shared by every module."""


class CicfError(Exception):
    """Base class for all library errors."""


class ConfigError(CicfError, ValueError):
    """Invalid configuration or argument value."""


class ShapeError(CicfError, ValueError):
    """Array dimensions do not agree."""


class DataError(CicfError, ValueError):
    """Malformed or empty input data."""


class AllocationError(CicfError, ValueError):
    """A per-cluster draw asks for more samples than the cluster holds."""


class DomainError(CicfError, ValueError):
    """Arguments outside the domain of a statistical formula."""


class NumericError(CicfError, ArithmeticError):
    """Non-finite values appeared during computation."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer
