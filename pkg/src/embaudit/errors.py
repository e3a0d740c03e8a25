"""Exception types shared across the toolkit."""


class EmbAuditError(Exception):
    """Base class for all toolkit errors."""


class FormatError(EmbAuditError):
    """Malformed container file (bad magic, version, or header fields)."""


class ConsistencyError(EmbAuditError):
    """Metadata disagrees with itself or with the feature matrix."""


class DataError(EmbAuditError):
    """Feature values violate the data contract (e.g. non-finite rows)."""


class IncompatibilityError(EmbAuditError):
    """Tables cannot be combined (dimension or model tag mismatch)."""


class ParameterError(EmbAuditError):
    """An argument is outside its documented range."""


class SplitError(EmbAuditError):
    """A split cannot be constructed from the given table."""


class CapacityError(EmbAuditError):
    """Not enough slides or patches to realize a sampling protocol."""


class TaskError(EmbAuditError):
    """The task is ill-posed for the given labels (e.g. a single class)."""


class DivergenceError(EmbAuditError):
    """Optimization produced a non-finite loss."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class DegenerateStainError(EmbAuditError):
    """Stain estimation failed on rank-deficient optical density data."""
