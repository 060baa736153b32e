class GadaError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(GadaError, ValueError):
    """A configuration value violates its declared constraints."""


class DatasetFormatError(GadaError, ValueError):
    """A detection-stream file or record is malformed or violates an invariant."""


class ShapeMismatchError(GadaError, ValueError):
    """Graph features, parameters and model configuration disagree."""


class CheckpointError(GadaError, ValueError):
    """A checkpoint file is truncated, malformed or incompatible."""
