"""Click-guided anomaly labeling toolkit.

Core pipeline: handcrafted or imported feature tensors, location-aware
residual matching against a defect-free reference bank, a small
differentiable mask refiner conditioned on clicks and language prompts,
semi-supervised training with a normalized focal loss, anomaly metrics,
and an HTTP annotation service.
"""

__version__ = "0.1.0"

from clicklabel.errors import (
    ClickLabelError,
    DegenerateBatchError,
    EmptyHistoryError,
    FormatError,
    GradientError,
    InvalidInputError,
    SessionStateError,
    UndefinedMetricError,
    WorkspaceError,
)

__all__ = [
    "ClickLabelError",
    "DegenerateBatchError",
    "EmptyHistoryError",
    "FormatError",
    "GradientError",
    "InvalidInputError",
    "SessionStateError",
    "UndefinedMetricError",
    "WorkspaceError",
    "__version__",
]
