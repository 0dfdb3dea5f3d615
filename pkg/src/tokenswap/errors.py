"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Two operands disagree on grid or feature shape."""


class ParameterError(ValueError):
    """A scalar parameter is outside its admissible range."""


class OutOfBoundsError(ValueError):
    """A mask translation would push set cells off the grid."""


class DisjointnessError(ValueError):
    """Target masks of a multi-reference request overlap."""


class ConfigError(ValueError):
    """A run configuration is missing a field or combines fields illegally."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class DivergenceError(FloatingPointError):
    """A sampler or training loop produced non-finite values."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
