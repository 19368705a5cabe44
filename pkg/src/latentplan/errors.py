"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Raised when shapes, variants or settings are inconsistent."""


class DatasetError(ValueError):
    """Raised for empty, malformed or insufficient datasets."""


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss becomes non-finite."""
