"""Custom exception classes for the ACR preconditioner."""

from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Optional, Tuple


class ErrorSeverity(Enum):
    """Error severity levels."""
    INFO = "info"
    WARNING = "warning"
    ERROR = "error"
    CRITICAL = "critical"


@dataclass
class ErrorContext:
    """Context information for error handling."""
    operation: str
    level: Optional[int] = None
    block_index: Optional[int] = None
    problem_kind: Optional[str] = None
    extra: Optional[Dict[str, Any]] = None


class ACRError(Exception):
    """Base exception for ACR preconditioner errors."""

    def __init__(self, message: str, context: Optional[ErrorContext] = None,
                 severity: ErrorSeverity = ErrorSeverity.ERROR):
        super().__init__(message)
        self.context = context
        self.severity = severity
        self.user_message = message

    def get_error_code(self) -> str:
        """Get unique error code for this error type."""
        return f"ACR_{self.__class__.__name__.upper()}"


class InvalidInputError(ACRError):
    """Non-finite entries or arguments outside their valid range."""

    def __init__(self, message: str, argument: Optional[str] = None, **kwargs: Any):
        super().__init__(message, **kwargs)
        self.argument = argument
        self.user_message = f"Invalid input: {message}"


class ShapeMismatchError(ACRError):
    """Operands whose sizes do not conform."""

    def __init__(self, message: str, expected: Optional[Tuple[int, ...]] = None,
                 actual: Optional[Tuple[int, ...]] = None, **kwargs: Any):
        super().__init__(message, **kwargs)
        self.expected = expected
        self.actual = actual
        self.user_message = f"Shape mismatch: {message}"


class TreeMismatchError(ACRError):
    """H-arithmetic between matrices built on different block trees."""

    def __init__(self, message: str, **kwargs: Any):
        super().__init__(message, **kwargs)
        self.user_message = f"Block tree mismatch: {message}"


class SingularPivotError(ACRError):
    """A diagonal block could not be inverted during elimination."""

    def __init__(self, message: str, level: Optional[int] = None,
                 block_index: Optional[int] = None,
                 index_range: Optional[Tuple[int, int]] = None, **kwargs: Any):
        super().__init__(message, **kwargs)
        self.level = level
        self.block_index = block_index
        self.index_range = index_range
        where = []
        if level is not None:
            where.append(f"level {level}")
        if block_index is not None:
            where.append(f"block row {block_index}")
        if index_range is not None:
            where.append(f"indices [{index_range[0]}, {index_range[1]})")
        suffix = f" ({', '.join(where)})" if where else ""
        self.user_message = f"Singular pivot: {message}{suffix}"

    def __str__(self) -> str:
        return self.user_message


class KrylovBreakdownError(ACRError):
    """Breakdown of a Krylov recurrence."""

    def __init__(self, message: str, iteration: Optional[int] = None, **kwargs: Any):
        super().__init__(message, **kwargs)
        self.iteration = iteration
        self.user_message = f"Krylov breakdown at iteration {iteration}: {message}"

    def __str__(self) -> str:
        return self.user_message


class FieldGenerationError(ACRError):
    """Random field sampling failed."""

    def __init__(self, message: str, attempts: Optional[int] = None, **kwargs: Any):
        super().__init__(message, **kwargs)
        self.attempts = attempts
        self.user_message = f"Field generation failed: {message}"


class PlanError(ACRError):
    """Invalid inputs to the parallel plane plan."""

    def __init__(self, message: str, **kwargs: Any):
        super().__init__(message, **kwargs)
        self.user_message = f"Plan error: {message}"


class ConfigurationError(ACRError):
    """Errors related to benchmark configuration."""

    def __init__(self, message: str, config_path: Optional[str] = None,
                 field_name: Optional[str] = None, **kwargs: Any):
        super().__init__(message, **kwargs)
        self.config_path = config_path
        self.field_name = field_name
        self.user_message = f"Configuration error: {message}"


class ExportError(ACRError):
    """Errors writing or reading result and data files."""

    def __init__(self, message: str, file_path: Optional[str] = None, **kwargs: Any):
        super().__init__(message, **kwargs)
        self.file_path = file_path
        self.user_message = f"Export error: {message}"


class ErrorFactory:
    """Factory for creating appropriate error instances based on error conditions."""

    ERROR_TYPE_MAP = {
        "input": InvalidInputError,
        "shape": ShapeMismatchError,
        "tree": TreeMismatchError,
        "pivot": SingularPivotError,
        "krylov": KrylovBreakdownError,
        "field": FieldGenerationError,
        "plan": PlanError,
        "config": ConfigurationError,
        "export": ExportError,
    }

    @classmethod
    def create_error(cls, error_type: str, message: str, **kwargs: Any) -> ACRError:
        """Create an appropriate error instance based on error type."""
        error_class = cls.ERROR_TYPE_MAP.get(error_type, ACRError)
        return error_class(message, **kwargs)

    @classmethod
    def from_exception(cls, exc: Exception, context: Optional[ErrorContext] = None) -> ACRError:
        """Convert a generic exception to an ACRError."""
        if isinstance(exc, ACRError):
            return exc

        if isinstance(exc, (FileNotFoundError, PermissionError, IsADirectoryError)):
            return ExportError(f"File error: {exc}", context=context)
        elif isinstance(exc, MemoryError):
            return ACRError(f"Out of memory: {exc}", context=context,
                            severity=ErrorSeverity.CRITICAL)
        elif isinstance(exc, (ValueError, FloatingPointError)):
            return InvalidInputError(f"Invalid value: {exc}", context=context)
        else:
            return ACRError(f"Unexpected error: {exc}", context=context)
