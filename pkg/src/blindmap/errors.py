"""Exception types raised across the package."""


class BlindMapError(Exception):
    """Base class for all package errors."""


class ConfigError(BlindMapError, ValueError):
    pass


class CoincidentPoint(BlindMapError, ValueError):
    """Bearing requested for a point that coincides with a station."""


class DegenerateGamma(BlindMapError, ValueError):
    """gamma = 1 makes the Gauss-Markov transition a Dirac."""


class InsufficientData(BlindMapError, ValueError):
    pass


class SingularDesign(BlindMapError, ValueError):
    pass


class InvalidCurvature(BlindMapError, ValueError):
    pass


class NotAdjacent(BlindMapError, ValueError):
    pass


class NoFeasiblePath(BlindMapError, RuntimeError):
    pass


class LengthMismatch(BlindMapError, ValueError):
    pass


class EmptyRegion(BlindMapError, ValueError):
    pass


class TrajectoryThroughBS(BlindMapError, ValueError):
    pass


class SingularGeometry(BlindMapError, ValueError):
    pass


class InvalidRadii(BlindMapError, ValueError):
    pass


class KTooLarge(BlindMapError, ValueError):
    pass


class ZeroEnergy(BlindMapError, ValueError):
    pass


class InsufficientHistory(BlindMapError, ValueError):
    pass


class EmptyMap(BlindMapError, ValueError):
    pass
