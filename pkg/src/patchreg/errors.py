"""Exception types shared across the package."""


class PatchRegError(Exception):
    """Base class for all package-specific errors."""


class InvalidParam(PatchRegError):
    """A transform parameter is non-finite or out of its legal range."""


class SingularTransform(PatchRegError):
    """The 2x2 block of a transform matrix is (numerically) singular."""


class RoleMismatch(PatchRegError):
    """An operation received a matrix in the wrong role (resampling vs pixel-flow)."""


class NotSimilarity(PatchRegError):
    """Matrix does not have the rotation+isotropic-scale structure required."""


class SizeMismatch(PatchRegError):
    """Raster/matrix side lengths are inconsistent for the requested operation."""


class InvalidThreshold(PatchRegError):
    """Confidence threshold outside [0, 1)."""


class OutOfSupport(PatchRegError):
    """Requested transform ranges would sample outside the source image."""


class NotEnoughMatches(PatchRegError):
    """Fewer than two correspondences were supplied to the rigid solver."""


class DegenerateGeometry(PatchRegError):
    """All moving points coincide; the rigid fit is underdetermined."""


class NoMatches(PatchRegError):
    """The matching pipeline produced no usable correspondences for a case."""


class EmptyBatch(PatchRegError):
    """An aggregate statistic was requested over zero records."""
