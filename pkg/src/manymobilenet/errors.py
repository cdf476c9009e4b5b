"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Incompatible or invalid tensor extents."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf escaped a public operation."""


class TapeError(RuntimeError):
    """A backward tape was reused or fed a mismatched gradient."""


class ConfigError(ValueError):
    """Invalid training, ensemble or model configuration."""


class DataError(ValueError):
    """Malformed dataset, manifest or image file."""


class CheckpointError(DataError):
    """Checkpoint file is truncated, corrupt or inconsistent."""


class MetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. a single class)."""
