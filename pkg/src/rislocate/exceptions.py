"""Exception types shared across the package."""


class RisLocateError(Exception):
    """Base class for all package-specific errors."""


class DegenerateGeometryError(RisLocateError):
    """Geometry is singular: coincident nodes or a direction at a frame pole."""


class BackIlluminationError(RisLocateError):
    """Surface is illuminated from behind; the gain model is undefined."""


class SingularInformationError(RisLocateError):
    """A Fisher information matrix is rank deficient; parameters unidentifiable."""


class EstimationError(RisLocateError):
    """An estimation stage could not produce a result."""


class UnderdeterminedError(EstimationError):
    """Too few receivers for a unique solution of the requested problem."""


class ConfigError(RisLocateError):
    """Invalid or missing configuration input."""
