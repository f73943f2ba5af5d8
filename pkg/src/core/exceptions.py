"""
Custom exception hierarchy for the wave control toolkit.

Provides structured error handling with:
- Hierarchical exception types for the different failure categories
- CLI exit code mapping (2 = bad input, 3 = numerical failure)
- Error codes for machine-readable reports
- Diagnostic details (offsets, defects, achieved bounds) kept out of the message
"""

from typing import Optional, Dict, Any, Sequence, Tuple
from enum import Enum


EXIT_INPUT_ERROR = 2
EXIT_NUMERICAL_ERROR = 3


class ErrorCode(str, Enum):
    """Standardized error codes for reports."""

    # General / configuration errors (1xxx)
    INTERNAL_ERROR = "ERR_1000"
    CONFIG_VALIDATION = "ERR_1001"
    GRID_ERROR = "ERR_1002"
    CFL_VIOLATION = "ERR_1003"
    INDEX_RANGE = "ERR_1004"

    # Expression language (2xxx)
    EXPRESSION_SYNTAX = "ERR_2000"
    UNKNOWN_IDENTIFIER = "ERR_2001"
    EXPRESSION_DOMAIN = "ERR_2002"

    # Numerical failures (3xxx)
    QUADRATURE_NOT_CONVERGED = "ERR_3000"
    PICARD_DIVERGENCE = "ERR_3001"
    STEP_SIZE_UNDERFLOW = "ERR_3002"
    SINGULAR_FACTOR = "ERR_3003"
    WITNESS_CONSTRUCTION = "ERR_3004"

    # State / data errors (4xxx)
    MEAN_ZERO_VIOLATION = "ERR_4000"
    OUT_OF_DOMAIN = "ERR_4001"

    # I/O errors (5xxx)
    ARTIFACT_WRITE = "ERR_5000"


class WaveControlError(Exception):
    """
    Base exception for all toolkit errors.

    Attributes:
        message: Human-readable error message
        error_code: Standardized error code
        exit_code: Process exit status the CLI uses for this error
        details: Additional diagnostic context
        original_error: The underlying exception, if any
    """

    def __init__(
        self,
        message: str = "An unexpected error occurred",
        error_code: ErrorCode = ErrorCode.INTERNAL_ERROR,
        exit_code: int = EXIT_NUMERICAL_ERROR,
        details: Optional[Dict[str, Any]] = None,
        original_error: Optional[Exception] = None,
    ):
        super().__init__(message)
        self.message = message
        self.error_code = error_code
        self.exit_code = exit_code
        self.details = details or {}
        self.original_error = original_error

    def to_dict(self, include_details: bool = False) -> Dict[str, Any]:
        """Convert to dictionary for the JSON report."""
        result = {
            "error": True,
            "code": self.error_code.value,
            "type": type(self).__name__,
            "message": self.message,
        }
        if include_details and self.details:
            result["details"] = self.details
        return result

    def __str__(self) -> str:
        return f"[{self.error_code.value}] {self.message}"


# =============================================================================
# Configuration Errors
# =============================================================================

class ConfigValidationError(WaveControlError):
    """Run configuration failed schema validation."""

    def __init__(
        self,
        message: str = "Invalid configuration",
        field_path: Optional[str] = None,
        details: Optional[Dict[str, Any]] = None,
        original_error: Optional[Exception] = None,
    ):
        details = details or {}
        if field_path:
            details["field"] = field_path
        super().__init__(
            message=message,
            error_code=ErrorCode.CONFIG_VALIDATION,
            exit_code=EXIT_INPUT_ERROR,
            details=details,
            original_error=original_error,
        )
        self.field_path = field_path


class GridError(WaveControlError):
    """Grid parameters are inconsistent with the requested computation."""

    def __init__(self, message: str = "Inconsistent grid", reason: Optional[str] = None):
        super().__init__(
            message=message,
            error_code=ErrorCode.GRID_ERROR,
            exit_code=EXIT_INPUT_ERROR,
            details={"reason": reason} if reason else None,
        )


class CFLViolationError(WaveControlError):
    """Time step exceeds the space step in the upwind oracle."""

    def __init__(self, dt: float, dx: float):
        super().__init__(
            message=f"CFL condition violated: dt={dt:.6g} > dx={dx:.6g}",
            error_code=ErrorCode.CFL_VIOLATION,
            exit_code=EXIT_INPUT_ERROR,
            details={"dt": dt, "dx": dx},
        )


class IndexRangeError(WaveControlError):
    """Kernel indices outside the admissible case table."""

    def __init__(self, message: str, n: int, k: int, l: int, allowed: Dict[str, Any]):
        super().__init__(
            message=message,
            error_code=ErrorCode.INDEX_RANGE,
            exit_code=EXIT_INPUT_ERROR,
            details={"n": n, "k": k, "l": l, "allowed": allowed},
        )


# =============================================================================
# Expression Errors
# =============================================================================

class ExpressionSyntaxError(WaveControlError):
    """Coefficient expression does not match the grammar."""

    def __init__(self, message: str, offset: int, expected: Sequence[str] = ()):
        self.offset = offset
        self.expected: Tuple[str, ...] = tuple(sorted(set(expected)))
        super().__init__(
            message=f"{message} at offset {offset}",
            error_code=ErrorCode.EXPRESSION_SYNTAX,
            exit_code=EXIT_INPUT_ERROR,
            details={"offset": offset, "expected": list(self.expected)},
        )


class UnknownIdentifierError(WaveControlError):
    """Identifier that is neither a variable, a constant nor a function."""

    def __init__(self, identifier: str, offset: int):
        self.identifier = identifier
        self.offset = offset
        super().__init__(
            message=f"Unknown identifier '{identifier}' at offset {offset}",
            error_code=ErrorCode.UNKNOWN_IDENTIFIER,
            exit_code=EXIT_INPUT_ERROR,
            details={"identifier": identifier, "offset": offset},
        )


class ExpressionDomainError(WaveControlError):
    """Evaluation left the domain of a function (log of non-positive, 1/0, ...)."""

    def __init__(
        self,
        subexpression: str,
        t: Any = None,
        x: Any = None,
        original_error: Optional[Exception] = None,
    ):
        self.subexpression = subexpression
        super().__init__(
            message=f"Domain error evaluating '{subexpression}'",
            error_code=ErrorCode.EXPRESSION_DOMAIN,
            exit_code=EXIT_NUMERICAL_ERROR,
            details={"subexpression": subexpression, "t": t, "x": x},
            original_error=original_error,
        )


# =============================================================================
# Numerical Errors
# =============================================================================

class QuadratureError(WaveControlError):
    """Adaptive quadrature did not reach the requested tolerance."""

    def __init__(self, achieved_bound: float, tol: float, interval: Tuple[float, float]):
        self.achieved_bound = achieved_bound
        super().__init__(
            message=(
                f"Quadrature did not converge on [{interval[0]:.6g}, {interval[1]:.6g}]: "
                f"achieved {achieved_bound:.3e} > tol {tol:.3e}"
            ),
            error_code=ErrorCode.QUADRATURE_NOT_CONVERGED,
            details={"achieved_bound": achieved_bound, "tol": tol, "interval": list(interval)},
        )


class PicardDivergenceError(WaveControlError):
    """Duhamel fixed-point iteration did not converge."""

    def __init__(self, last_ratio: float, iterations: int, last_difference: float):
        self.last_ratio = last_ratio
        super().__init__(
            message=(
                f"Picard iteration not converged after {iterations} iterates "
                f"(last difference {last_difference:.3e}, contraction ratio {last_ratio:.3g})"
            ),
            error_code=ErrorCode.PICARD_DIVERGENCE,
            details={
                "last_ratio": last_ratio,
                "iterations": iterations,
                "last_difference": last_difference,
            },
        )


class StepSizeUnderflowError(WaveControlError):
    """ODE integrator could not reach x = 1."""

    def __init__(self, achieved_x: float, s: complex, solver_message: str = ""):
        self.achieved_x = achieved_x
        super().__init__(
            message=f"ODE step size underflow at x={achieved_x:.6g} for s={s}",
            error_code=ErrorCode.STEP_SIZE_UNDERFLOW,
            details={
                "achieved_x": achieved_x,
                "s": [s.real, s.imag] if isinstance(s, complex) else s,
                "solver_message": solver_message,
            },
        )


class SingularFactorError(WaveControlError):
    """Diagonal factor of a Fredholm system vanishes at a quadrature node."""

    def __init__(self, node: float, value: float, component: int):
        super().__init__(
            message=f"Diagonal factor A[{component}] vanishes at node x={node:.6g} (value {value:.3e})",
            error_code=ErrorCode.SINGULAR_FACTOR,
            details={"node": node, "value": value, "component": component},
        )


class WitnessConstructionError(WaveControlError):
    """Non-observability witness could not be built."""

    def __init__(self, reason: str):
        super().__init__(
            message=f"Witness construction failed: {reason}",
            error_code=ErrorCode.WITNESS_CONSTRUCTION,
            details={"reason": reason},
        )


# =============================================================================
# State / Data Errors
# =============================================================================

class MeanZeroViolationError(WaveControlError):
    """Initial data not in H: the mean of p - q is not zero."""

    def __init__(self, defect: Any, tolerance: float):
        self.defect = defect
        super().__init__(
            message=f"Mean-zero constraint violated: defect {defect} exceeds {tolerance:.1e}",
            error_code=ErrorCode.MEAN_ZERO_VIOLATION,
            exit_code=EXIT_INPUT_ERROR,
            details={"defect": defect, "tolerance": tolerance},
        )


class OutOfDomainError(WaveControlError):
    """A characteristic position left [0, 1]."""

    def __init__(self, position: float, context: str = ""):
        super().__init__(
            message=f"Position {position:.12g} outside [0, 1] {context}".rstrip(),
            error_code=ErrorCode.OUT_OF_DOMAIN,
            details={"position": position, "context": context},
        )


# =============================================================================
# I/O Errors
# =============================================================================

class ArtifactWriteError(WaveControlError):
    """Report or CSV artifact could not be written."""

    def __init__(self, path: str, original_error: Optional[Exception] = None):
        super().__init__(
            message=f"Could not write artifact {path}",
            error_code=ErrorCode.ARTIFACT_WRITE,
            details={"path": path},
            original_error=original_error,
        )
