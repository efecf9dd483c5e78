"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration and usage
problems exit 2, data and file-format problems exit 3, broken training
invariants exit 4.
"""


class ConfigError(ValueError):
    """Invalid configuration or command usage."""


class DataFormatError(Exception):
    """Malformed, truncated, or inconsistent on-disk data."""


class FreezeViolationError(RuntimeError):
    """A parameter group that must stay fixed changed during training."""
