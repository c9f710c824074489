"""Exception types shared across the package."""


class ObjSlamError(Exception):
    """Base class for all objslam errors."""


class PointBehindCamera(ObjSlamError):
    """A 3D point with non-positive depth was passed to the projection."""


class DegenerateGeometry(ObjSlamError):
    """Input geometry is rank-deficient (collinear points, parallel rays, ...)."""


class NonConvergence(ObjSlamError):
    """An iterative solver failed to produce a usable estimate."""


class DuplicateModelId(ObjSlamError):
    """A model with this id is already stored in the database."""


class UnknownMetric(ObjSlamError):
    """Unrecognized similarity metric name."""


class EmptyDatabase(ObjSlamError):
    """The object database contains no models."""


class ScaleUnobservable(ObjSlamError):
    """All camera centers coincide with the origin; scale cannot be estimated."""


class ConfigError(ObjSlamError):
    """Invalid configuration value or malformed config file."""


class AssociationError(ObjSlamError):
    """Trajectories cannot be associated by timestamp."""
