"""Exception types shared across the package."""


class GestureGenError(Exception):
    """Base class for package errors."""


class ConfigError(GestureGenError):
    """Invalid or inconsistent configuration."""


class ContractError(GestureGenError):
    """An operation was called with arguments violating its contract."""


class ClipFormatError(GestureGenError):
    """A clip directory on disk is malformed or incomplete."""


class DataError(GestureGenError):
    """Dataset-level problem: missing clips, mismatched ids, short audio."""
