"""Exception types shared across the package."""


class GnotError(Exception):
    """Base class for all library errors."""


class ShapeError(GnotError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(GnotError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(GnotError, ValueError):
    """Model or run configuration is inconsistent."""


class DatasetError(GnotError, ValueError):
    """Dataset file is malformed or violates the dataset-wide shape contract."""


class CheckpointError(GnotError, ValueError):
    """Checkpoint file is unreadable, corrupted, or incompatible."""
