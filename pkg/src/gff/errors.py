"""Exception classes shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NumericError(FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""


class FormatError(ValueError):
    """A weight file, image or manifest could not be parsed."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given labels (e.g. AP with no positives)."""


class ConfigError(ValueError):
    """A run configuration could not be parsed or validated."""
