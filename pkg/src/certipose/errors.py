"""Exception hierarchy shared across the library."""


class CertiposeError(Exception):
    """Base class for all library errors."""


class ConfigError(CertiposeError):
    """Malformed or inconsistent configuration."""


class DataError(CertiposeError):
    """Malformed dataset file or record."""


# --- geometry ---

class NonPositiveDepth(CertiposeError):
    """A transformed point landed on or behind the camera plane."""


class NotARotation(CertiposeError):
    """Matrix failed the orthonormality / determinant check."""


# --- pnp ---

class TooFewPoints(CertiposeError):
    """Fewer correspondences than the minimal sample size of 4."""


class DegenerateConfiguration(CertiposeError):
    """Normal matrix singular beyond recovery (collinear/coplanar points)."""


class NoConsensus(CertiposeError):
    """RANSAC could not find an inlier set of at least 4 points."""


class NotAtOptimum(CertiposeError):
    """Gradient requested at a point that is not a stationary point."""


class SingularHessian(CertiposeError):
    """Hessian condition number too large for implicit differentiation."""


# --- event pipeline ---

class EmptyFrame(CertiposeError):
    """Event frame contains no nonzero pixel."""


# --- certifier ---

class EmptySet(CertiposeError):
    """Nearest-neighbour query against or from an empty point set."""


# --- regressor / corrector ---

class NonFiniteGradient(CertiposeError):
    """NaN or Inf appeared in a gradient; the update must be skipped."""


class NoActiveMaps(CertiposeError):
    """Every correction target map was masked out."""


class AllLandmarksOutOfCrop(CertiposeError):
    """No projected landmark fell inside the crop window."""


# --- evaluation ---

class ZeroGroundTruthTranslation(CertiposeError):
    """Relative translation error undefined for a zero ground-truth vector."""


class NoEvaluableFrames(CertiposeError):
    """Aggregation requested over an empty error list."""
