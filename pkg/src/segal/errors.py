"""Exception hierarchy shared across the package."""


class SegalError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(SegalError):
    """Invalid configuration value, flag, or descriptor."""


class ShapeError(SegalError):
    """Array arguments with incompatible or unexpected shapes."""


class NumericalError(SegalError):
    """NaN/Inf encountered where all values must stay finite."""


class TensorFormatError(SegalError):
    """Corrupt or truncated tensor file."""


class PoolStateError(SegalError):
    """Pool bookkeeping request that violates the pool contract."""


class UnknownIdError(SegalError):
    """Lookup of an image id the oracle has no label for."""


class InsufficientDataError(SegalError):
    """Statistical test invoked with too few usable samples."""
