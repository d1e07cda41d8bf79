"""Exception hierarchy shared across the package."""


class TreeNetError(Exception):
    """Base class for all errors raised by this package."""

    code = "error"


class DataError(TreeNetError):
    """Dataset ingestion or generation failed (unpaired files, bad sizes, ...)."""

    code = "data"


class SpecError(TreeNetError):
    """A model/shape specification is internally inconsistent."""

    code = "spec"


class ShapeMismatchError(TreeNetError):
    """A tensor does not match the shape a contract requires."""

    code = "shape-mismatch"


class TrainingDivergedError(TreeNetError):
    """Training produced a non-finite loss."""

    code = "training-diverged"

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class StaleArtifactError(TreeNetError):
    """A persisted artifact no longer matches its upstream dependencies."""

    code = "stale-dependency"


class GraphError(TreeNetError):
    """A layer graph is inconsistent or contains an unsupported node."""

    code = "graph"


class LockError(TreeNetError):
    """The run directory is already in use by another invocation."""

    code = "locked"


class ConfigError(TreeNetError):
    """An experiment configuration is invalid."""

    code = "config"
