"""Exception types shared across the package."""


class WxRestoreError(Exception):
    """Base class for all package errors."""


class ShapeError(WxRestoreError, ValueError):
    pass


class ConfigError(WxRestoreError, ValueError):
    pass


class NumericError(WxRestoreError, FloatingPointError):
    pass


class SpecError(WxRestoreError, ValueError):
    """Invalid degradation parameters."""


class CheckpointError(WxRestoreError):
    pass
