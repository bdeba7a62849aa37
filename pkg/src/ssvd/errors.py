"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes are inconsistent; the message names both shapes."""


class ConfigurationError(ValueError):
    """A config value or weight structure violates a documented constraint."""
