"""Exception types shared across the package."""


class ClickLabelError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ClickLabelError):
    """An argument violates a documented precondition."""


class FormatError(ClickLabelError):
    """A binary or text asset does not parse; message names the bad field."""


class SessionStateError(ClickLabelError):
    """A session operation was issued in a state that cannot serve it."""


class EmptyHistoryError(SessionStateError):
    """Undo requested on a session with no clicks."""


class UndefinedMetricError(ClickLabelError):
    """The metric is undefined for this input (e.g. single-class labels)."""


class DegenerateBatchError(ClickLabelError):
    """Every pixel of the batch is excluded from the loss; skip the step."""


class GradientError(ClickLabelError):
    """A gradient is non-finite; the optimizer step was rejected."""


class WorkspaceError(ClickLabelError):
    """Workspace manifest or asset lookup failed."""
