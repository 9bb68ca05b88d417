"""Exception hierarchy shared across the package.

Everything raised on purpose derives from StreetSplatError so callers can
catch one type at the boundary and still tell failure modes apart.
"""


class StreetSplatError(Exception):
    """Base class for all errors raised by this package."""


class MissingFileError(StreetSplatError):
    """A dataset file that the layout promises is absent."""


class MalformedPoseError(StreetSplatError):
    """A pose row does not parse or is not a proper rigid transform."""


class DimensionMismatchError(StreetSplatError):
    """Array shapes or dataset cardinalities disagree."""


class ShapeMismatchError(DimensionMismatchError):
    """Two arrays that must share a shape do not."""


class MismatchedForwardError(DimensionMismatchError):
    """A backward pass was handed buffers that do not match its forward output."""


class BehindCameraError(StreetSplatError):
    """A point lies at or behind the camera plane."""


class NonPositiveDepthError(StreetSplatError):
    """A depth that must be strictly positive is not."""


class EmptyResultError(StreetSplatError):
    """An operation produced no usable output (e.g. no point projects into view)."""


class EmptyCloudError(EmptyResultError):
    """An operation requires at least one point or Gaussian."""


class NoValidPixelsError(StreetSplatError):
    """A depth map has no valid samples to propagate from."""


class CheckpointError(StreetSplatError):
    """A checkpoint file is truncated, has a bad magic, or cannot be read."""


class VersionMismatchError(CheckpointError):
    """A serialized file carries an unsupported format version."""


class ProtocolError(StreetSplatError):
    """A guidance wire-protocol frame is malformed or reports a remote failure."""


class ProviderUnavailableError(StreetSplatError):
    """A guidance provider cannot be reached."""


class ProviderTimeoutError(ProviderUnavailableError):
    """A guidance provider did not answer within the allowed time."""


class ConfigError(StreetSplatError):
    """A config file or config value is invalid."""


class InvalidRateError(ConfigError):
    """A fraction that must lie strictly between 0 and 1 does not."""
