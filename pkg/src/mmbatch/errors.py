"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class ManifestError(ValueError):
    """A manifest CSV is malformed."""


class CheckpointError(ValueError):
    """A checkpoint file cannot be decoded."""


class ImageFormatError(ValueError):
    """A raster file is not a supported PPM/PGM image."""


class ConfigError(ValueError):
    """A configuration value violates its schema."""


class TrainingError(RuntimeError):
    """Training cannot continue (e.g. the loss became non-finite)."""
