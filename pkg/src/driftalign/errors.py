"""Exception types shared across the package."""


class DriftAlignError(Exception):
    """Base class for all package-specific errors."""


class SceneError(DriftAlignError):
    """Malformed or inconsistent scene data on disk."""


class ConfigError(DriftAlignError):
    """Invalid configuration file or parameter combination."""


class StageError(DriftAlignError):
    """Pipeline stages invoked out of order or on incompatible checkpoints."""
