"""Exception taxonomy. CLI exit codes: 1 verification failure, 2 input error,
3 config error (mapped in cli.py)."""


class CombnetError(Exception):
    """Base class for all package errors."""


class ConfigError(CombnetError):
    """Invalid configuration: bad resolution, groups not dividing channels,
    malformed config file, inconsistent spec/packing."""


class LayoutMismatchError(CombnetError):
    """Tensor passed in the wrong memory layout."""


class ShapeMismatchError(CombnetError):
    """Array dims inconsistent with the declared spec."""


class InputError(CombnetError):
    """Unreadable or malformed external input (image, JSON, weight file)."""


class WeightFormatError(InputError):
    """Malformed weight file. `code` distinguishes the failure mode."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code  # one of: magic, version, checksum, shape, truncated


class UnsupportedConfigError(CombnetError):
    """Operation invoked outside its supported envelope (e.g. comb with stride > 1)."""
