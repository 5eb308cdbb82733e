"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration value or schema violation."""


class ShapeError(ValueError):
    """Tensor shape or resolution mismatch."""


class IntegrityError(RuntimeError):
    """Corrupted or truncated dataset container."""

    def __init__(self, message: str, sample_index: int | None = None):
        super().__init__(message)
        self.sample_index = sample_index


class PaletteError(ValueError):
    """Label map contains a class ID outside the configured palette."""


class SamplingExhaustedError(RuntimeError):
    """No synthetic patch has any cross-dataset match."""


class MetricUndefinedError(RuntimeError):
    """A metric cannot be computed, e.g. zero retained patch pairs."""
