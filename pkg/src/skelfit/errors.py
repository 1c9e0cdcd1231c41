"""Exception types shared across the package."""


class SkelfitError(Exception):
    """Base class for all package errors."""


class BehindCamera(SkelfitError):
    """Point has non-positive depth after the world-to-camera transform."""


class DimensionMismatch(SkelfitError):
    pass


class TopologyMismatch(SkelfitError):
    pass


class EmptyMask(SkelfitError):
    pass


class MultipleComponents(SkelfitError):
    pass


class DegenerateExtent(SkelfitError):
    pass


class EmptyGraph(SkelfitError):
    pass


class InvalidPairs(SkelfitError):
    pass


class NotNormalized(SkelfitError):
    pass


class SingularBlend(SkelfitError):
    """Blended skinning transform is numerically non-invertible."""


class PartCountMismatch(SkelfitError):
    pass


class InvalidSkeleton(SkelfitError):
    """Skeleton violates a structural invariant (PD precisions, tree shape)."""


class DataError(SkelfitError):
    """Malformed or missing input data (files, directories)."""
