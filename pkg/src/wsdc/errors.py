"""Exception hierarchy shared across the package."""


class WsdcError(Exception):
    """Base class for all package errors."""


class ConfigError(WsdcError, ValueError):
    """Invalid configuration or construction parameters."""


class ContractError(WsdcError, ValueError):
    """A caller violated an operation's preconditions (shapes, ranges)."""


class CapacityError(WsdcError):
    """Problem too large for the requested solver."""


class UnsupportedError(WsdcError):
    """Requested combination of options is not supported."""


class FormatError(WsdcError):
    """Malformed on-disk data (dataset files, model containers)."""


class NumericalError(WsdcError):
    """Non-finite values appeared during training.

    ``snapshot`` holds whatever diagnostics the raiser had at hand.
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
