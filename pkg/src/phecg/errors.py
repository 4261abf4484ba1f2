"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor arguments have incompatible or unsupported shapes."""


class ConfigError(ValueError):
    """A model / run configuration is invalid (bad widths, unknown keys, ...)."""


class DataError(ValueError):
    """An on-disk dataset or annotation file is malformed."""


class NumericError(ArithmeticError):
    """Training produced non-finite values (NaN/Inf gradients)."""
