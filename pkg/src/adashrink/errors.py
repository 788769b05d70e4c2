"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(ValueError):
    """Bad model, training, or corpus configuration."""


class AdmissibilityError(ValueError):
    """Input too short to admit any valid alignment for its transcription."""


class CheckpointError(ValueError):
    """Malformed checkpoint file or parameter-set mismatch."""


class CorpusError(ValueError):
    """Malformed corpus files or impossible synthesis settings."""


class NumericError(RuntimeError):
    """Non-finite loss or other numeric breakdown during training."""
