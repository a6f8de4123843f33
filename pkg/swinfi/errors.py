"""
Exception types raised by the SwinFi library.

Everything derives from SwinFiError so the CLI can report library failures
uniformly and let genuine bugs propagate.
"""

from typing import Any, Dict, Optional


class SwinFiError(Exception):
    """Base class for all SwinFi errors"""


class ConfigError(SwinFiError):
    """Invalid model, data or run configuration"""

    def __init__(self, message: str, errors: Optional[list] = None):
        super().__init__(message)
        self.errors = errors or [message]


class ShapeError(SwinFiError):
    """Tensor or array extents do not fit the operation"""


class NonFiniteError(SwinFiError):
    """An operation produced NaN or Inf"""


class FormatError(SwinFiError):
    """Bad magic, version or field in a binary container"""


class LengthError(SwinFiError):
    """Declared sizes disagree with the payload"""


class DegenerateFitError(SwinFiError):
    """Linear phase fit with coincident end subcarriers"""


class DegenerateDataError(SwinFiError):
    """Zero variance on a usable channel"""


class DegenerateMetricError(SwinFiError):
    """Metric reference has zero energy"""


class LabelError(SwinFiError):
    """Class label outside [0, n_classes)"""


class IncompatibleCheckpointError(SwinFiError):
    """Config digest of a checkpoint or record does not match"""


class StreamError(SwinFiError):
    """Sink or source failure during streaming; keeps the partial stats"""

    def __init__(self, message: str, stats: Any = None):
        super().__init__(message)
        self.stats = stats


class TrainingError(SwinFiError):
    """Training aborted (NaN loss or divergence)"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
