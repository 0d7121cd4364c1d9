"""Exception hierarchy shared by every wflab module."""


class WFLabError(Exception):
    """Base class for all wflab errors."""


class ConfigError(WFLabError, ValueError):
    """Invalid configuration (bad preset, inconsistent stack, bad ratios...)."""


class DataError(WFLabError, ValueError):
    """Input data violates a precondition (labels out of range, empty set...)."""


class EmptyInputError(DataError):
    pass


class OrderingError(DataError):
    """Timestamps are not non-decreasing."""


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class BuildError(ConfigError):
    """Layer stack shapes do not line up."""


class NumericError(WFLabError, ArithmeticError):
    """Training produced a non-finite loss."""


class FormatError(DataError):
    """Malformed on-disk file."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class FingerprintMismatchError(FormatError):
    """Checkpoint parameters do not belong to the requested architecture."""


class UninitializedStatsError(WFLabError, RuntimeError):
    """Batch norm used in inference mode before running stats exist."""


class DimensionError(DataError):
    """Array shapes are incompatible with the operation."""
