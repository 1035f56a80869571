"""Exception types shared across the package."""


class HGTSError(Exception):
    """Base class for all package errors."""


class ShapeError(HGTSError, ValueError):
    """Operand extents are incompatible."""


class NumericError(HGTSError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ConfigError(HGTSError, ValueError):
    """Invalid model or run configuration."""


class DataError(HGTSError, ValueError):
    """Input data is malformed or too short."""


class FormatError(HGTSError, ValueError):
    """Checkpoint bytes do not follow the on-disk format."""


class IntegrityError(HGTSError, ValueError):
    """Checkpoint contents disagree with the configuration."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""
