"""Exception types shared across the package."""


class FusecastError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FusecastError):
    """Scene or option validation failure."""

    code = "ConfigError"


class CapacityExceeded(ConfigError):
    code = "CapacityExceeded"


class DanglingControlGroup(ConfigError):
    code = "DanglingControlGroup"


class DuplicateChannel(ConfigError):
    code = "DuplicateChannel"


class BadDimensions(ConfigError):
    code = "BadDimensions"


class DimensionsTooSmall(FusecastError):
    """Frame too small to carry the machine-readable signature block."""


class UndecodableRegion(FusecastError):
    """Signature bit cells are not saturated black/white."""


class FileUnreadable(FusecastError):
    """File source directory missing, empty, or unparseable."""


class UnknownChannel(FusecastError):
    code = "UnknownChannel"


class InvalidLayout(FusecastError):
    code = "InvalidLayout"


class MalformedCommand(FusecastError):
    code = "MalformedCommand"


class Unauthorized(FusecastError):
    code = "Unauthorized"


class AckTimeout(FusecastError):
    code = "AckTimeout"


class EncodeFailure(FusecastError):
    """JPEG encoding failed."""


class WireFormatError(FusecastError):
    """Malformed bytes on a FUSE/1 connection."""


class BindFailure(FusecastError):
    """Could not bind a listener address."""


class SetupFailure(FusecastError):
    """Benchmark could not assemble its server/client pair."""


class EmptySeries(FusecastError):
    """Smoothing requires at least one sample."""
