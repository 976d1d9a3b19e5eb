"""Shared exception types.

Every module raises one of these so callers (and the CLI) can map failures
to exit codes without string matching.
"""


class ShapeError(ValueError):
    """Operands have incompatible or invalid dimensions."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class UsageError(ValueError):
    """An operation was called outside its contract (bad token id, missing EOS, ...)."""


class DecodeError(ValueError):
    """A token sequence cannot be mapped back to text."""


class FormatError(ValueError):
    """A serialized file is corrupt, truncated, or has the wrong version."""
