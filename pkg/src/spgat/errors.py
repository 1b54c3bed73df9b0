"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes or grid sizes are incompatible."""


class NumericalError(ArithmeticError):
    """A NaN/Inf or an undefined value (log of non-positive, ...) appeared."""


class ConfigError(ValueError):
    """A configuration or checkpoint does not validate."""


class DataError(OSError):
    """An image or dataset could not be read or paired."""
