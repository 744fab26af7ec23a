"""Exception types shared across the package."""


class SpikebitError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SpikebitError, ValueError):
    """Operand shapes violate an operation's contract."""


class NumericError(SpikebitError, ArithmeticError):
    """A numeric invariant failed (non-finite value, non-positive variance)."""


class ConfigError(SpikebitError, ValueError):
    """An invalid configuration value or combination."""


class EncodingError(SpikebitError, ValueError):
    """A value outside the declared alphabet of a codec."""


class DegenerateWeightsError(SpikebitError, ValueError):
    """Weight tensor cannot be standardized (zero spread)."""


class DataError(SpikebitError, ValueError):
    """Dataset, cache, or checkpoint contents are inconsistent."""


class TrainingError(SpikebitError, RuntimeError):
    """Training aborted (non-finite loss or similar)."""
