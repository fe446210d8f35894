"""Exception hierarchy shared by every module."""


class SepMambaError(Exception):
    """Base class for all package errors."""


class ShapeError(SepMambaError, ValueError):
    pass


class ConfigError(SepMambaError, ValueError):
    pass


class DomainError(SepMambaError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class DataError(SepMambaError, ValueError):
    """Malformed audio, manifest or checkpoint content."""


class NumericalError(SepMambaError, ArithmeticError):
    """NaN or Inf encountered where finite values are required."""
