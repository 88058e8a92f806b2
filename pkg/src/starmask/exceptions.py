"""Exception types raised across the package."""


class StarmaskError(Exception):
    """Base class for all package errors."""


class BoundsError(StarmaskError, ValueError):
    """Contour radius parameters violate r_min < r0 < r_max."""


class ResolutionError(StarmaskError, ValueError):
    """Angular quadrature grid is too coarse."""


class DomainError(StarmaskError, ValueError):
    """A location lies outside the normalized [-1, 1]^2 image domain."""


class EmptyContourSetError(StarmaskError, ValueError):
    pass


class ShapeMismatchError(StarmaskError, ValueError):
    pass


class KernelSizeError(StarmaskError, ValueError):
    pass


class DegenerateEmbeddingError(StarmaskError, ValueError):
    """An embedding has (numerically) zero norm."""


class CapabilityError(StarmaskError, RuntimeError):
    """The backend does not implement the requested operation."""


class BackendError(StarmaskError, RuntimeError):
    """Transport or protocol failure while talking to a model backend."""


class OptimizationError(StarmaskError, RuntimeError):
    """Non-finite loss or gradient during optimization."""


class UndefinedMetricError(StarmaskError, ValueError):
    pass
