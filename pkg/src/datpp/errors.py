"""Exception types raised across the package."""


class DatError(Exception):
    """Base class for all package errors."""


class DimensionError(DatError, ValueError):
    pass


class ConfigError(DatError, ValueError):
    pass


class NumericError(DatError, ArithmeticError):
    pass


class StateError(DatError, RuntimeError):
    pass


class ManifestError(DatError, ValueError):
    pass


class FormatError(DatError, ValueError):
    pass


class DataError(DatError, ValueError):
    pass
