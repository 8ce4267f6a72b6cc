"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An array does not have the shape an operation requires."""


class ConfigError(ValueError):
    """A configuration value violates a structural constraint."""


class InputError(ValueError):
    """Input data is unusable (e.g. non-finite sampling offsets)."""
