"""Error types shared across the package."""


class DuosegError(ValueError):
    pass


class InvalidParameterError(DuosegError):
    pass


class BoundsError(DuosegError):
    """Crop box extends outside its parent volume."""


class ShapeError(DuosegError):
    pass


class NoOverlapError(DuosegError):
    """Two crop boxes share no voxels in parent coordinates."""


class ConfigurationError(DuosegError):
    pass


class NumericError(DuosegError):
    """A loss term became non-finite."""
