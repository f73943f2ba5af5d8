"""
Core module for the wave control toolkit.

Provides centralized error handling, logging, settings and report models.
"""

from .exceptions import (
    WaveControlError,
    ConfigValidationError,
    GridError,
    CFLViolationError,
    IndexRangeError,
    ExpressionSyntaxError,
    UnknownIdentifierError,
    ExpressionDomainError,
    QuadratureError,
    PicardDivergenceError,
    StepSizeUnderflowError,
    SingularFactorError,
    WitnessConstructionError,
    MeanZeroViolationError,
    OutOfDomainError,
    ArtifactWriteError,
    ErrorCode,
    EXIT_INPUT_ERROR,
    EXIT_NUMERICAL_ERROR,
)
from .logging_config import setup_logging, get_logger, LogContext, Timer, log_duration, set_run_id
from .settings import Settings, Tolerances, GridSettings, get_settings, load_yaml_defaults
from .responses import (
    AnalysisResult,
    Report,
    TimingBlock,
    canonical_json,
    success,
    failure,
    skipped,
)

__all__ = [
    # Exceptions
    "WaveControlError",
    "ConfigValidationError",
    "GridError",
    "CFLViolationError",
    "IndexRangeError",
    "ExpressionSyntaxError",
    "UnknownIdentifierError",
    "ExpressionDomainError",
    "QuadratureError",
    "PicardDivergenceError",
    "StepSizeUnderflowError",
    "SingularFactorError",
    "WitnessConstructionError",
    "MeanZeroViolationError",
    "OutOfDomainError",
    "ArtifactWriteError",
    "ErrorCode",
    "EXIT_INPUT_ERROR",
    "EXIT_NUMERICAL_ERROR",
    # Logging
    "setup_logging",
    "get_logger",
    "LogContext",
    "Timer",
    "log_duration",
    "set_run_id",
    # Settings
    "Settings",
    "Tolerances",
    "GridSettings",
    "get_settings",
    "load_yaml_defaults",
    # Responses
    "AnalysisResult",
    "Report",
    "TimingBlock",
    "canonical_json",
    "success",
    "failure",
    "skipped",
]
