"""Exception hierarchy shared across the package."""


class SSDError(Exception):
    """Base class for all errors raised by ssdiff."""


class ParameterError(SSDError, ValueError):
    pass


class DomainError(SSDError, ValueError):
    pass


class ShapeError(SSDError, ValueError):
    pass


class ConstructionError(SSDError, ValueError):
    pass


class ResourceError(SSDError, MemoryError):
    pass


class StateError(SSDError, RuntimeError):
    """Raised when a step is numerically infeasible (e.g. negative covariance)."""


class TrainingError(SSDError, RuntimeError):
    pass


class ChainError(SSDError, RuntimeError):
    def __init__(self, t: int, message: str):
        super().__init__(f"t={t}: {message}")
        self.t = t


class NotFoundError(SSDError, LookupError):
    pass


class FormatError(SSDError, ValueError):
    """Malformed STF tensor or SSDW checkpoint file."""
