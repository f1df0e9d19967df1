"""Exception types shared across the package."""


class LorsMergeError(Exception):
    """Base class for all errors raised by lorsmerge."""


class ContainerFormatError(LorsMergeError):
    """A checkpoint file violates the container layout."""


class SchemaError(LorsMergeError):
    """A recipe or workbench config document violates its schema."""


class PlanExecutionError(LorsMergeError):
    """A merge plan failed while executing; message carries the node path."""


class TrainingDivergedError(LorsMergeError):
    """Loss became non-finite during toy-model training."""

    def __init__(self, epoch: int, message: str | None = None):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")
