"""Exception hierarchy shared across the package."""


class ScribsalError(Exception):
    """Base class for all package errors."""


class MissingModality(ScribsalError):
    """A declared modality file is absent for a sample."""


class AlignmentError(ScribsalError):
    """Rasters of one sample disagree in height/width."""


class EncodingError(ScribsalError):
    """A scribble raster contains a value outside {0, 1, 2}."""


class ConfigError(ScribsalError):
    """Invalid or inconsistent configuration."""


class IoError(ScribsalError):
    """Filesystem read/write failure."""


class ShapeError(ScribsalError):
    """Tensor/array shape mismatch between collaborating inputs."""


class PreconditionError(ScribsalError):
    """An operation was called with arguments violating its preconditions."""


class EmptyScribbleError(ScribsalError):
    """Scribble map has no labeled pixel to sample from."""


class RangeError(ScribsalError):
    """Coordinate outside the valid image range."""


class PartitionError(ScribsalError):
    """A model parameter could not be assigned to exactly one group."""


class NumericsError(ScribsalError):
    """Non-finite value encountered during training."""


class ManifestError(ScribsalError):
    """Prediction/ground-truth id sets disagree."""
