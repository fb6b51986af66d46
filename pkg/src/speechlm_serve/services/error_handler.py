"""
Centralized error handling.

Maps any exception onto a wire ``ErrorCode``, assigns a category and
severity, logs it at a matching level and keeps per-code statistics. The
server turns the result into ``0x7F`` frames; the CLI into exit codes.
"""

import asyncio
import logging
from enum import Enum
from typing import Any, Dict, Optional, Tuple

from pydantic import ValidationError as PydanticValidationError

from ..errors import ErrorCode, SpeechLMError
from ..models.response_models import ErrorDetails


class ErrorCategory(str, Enum):
    """Categories of errors that can occur"""
    VALIDATION_ERROR = "validation_error"
    PROTOCOL_ERROR = "protocol_error"
    ADAPTER_ERROR = "adapter_error"
    CAPACITY_ERROR = "capacity_error"
    NUMERIC_ERROR = "numeric_error"
    IO_ERROR = "io_error"
    UNKNOWN_ERROR = "unknown_error"


class ErrorSeverity(str, Enum):
    """Error severity levels"""
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"
    CRITICAL = "critical"


CATEGORY_BY_CODE = {
    ErrorCode.INVALID_ARGUMENT: ErrorCategory.VALIDATION_ERROR,
    ErrorCode.BAD_REQUEST: ErrorCategory.VALIDATION_ERROR,
    ErrorCode.SCHEMA_ERROR: ErrorCategory.VALIDATION_ERROR,
    ErrorCode.FRAME_TOO_LARGE: ErrorCategory.PROTOCOL_ERROR,
    ErrorCode.MALFORMED_FRAME: ErrorCategory.PROTOCOL_ERROR,
    ErrorCode.INCOMPLETE_FRAME: ErrorCategory.PROTOCOL_ERROR,
    ErrorCode.UNKNOWN_ADAPTER: ErrorCategory.ADAPTER_ERROR,
    ErrorCode.BAD_CONTAINER: ErrorCategory.ADAPTER_ERROR,
    ErrorCode.QUEUE_FULL: ErrorCategory.CAPACITY_ERROR,
    ErrorCode.RESOURCE_EXHAUSTED: ErrorCategory.CAPACITY_ERROR,
    ErrorCode.OUT_OF_PAGES: ErrorCategory.CAPACITY_ERROR,
    ErrorCode.POSITION_OVERFLOW: ErrorCategory.CAPACITY_ERROR,
    ErrorCode.NUMERIC_ERROR: ErrorCategory.NUMERIC_ERROR,
}

SEVERITY_BY_CATEGORY = {
    ErrorCategory.VALIDATION_ERROR: ErrorSeverity.LOW,
    ErrorCategory.PROTOCOL_ERROR: ErrorSeverity.LOW,
    ErrorCategory.ADAPTER_ERROR: ErrorSeverity.MEDIUM,
    ErrorCategory.CAPACITY_ERROR: ErrorSeverity.MEDIUM,
    ErrorCategory.IO_ERROR: ErrorSeverity.MEDIUM,
    ErrorCategory.NUMERIC_ERROR: ErrorSeverity.HIGH,
    ErrorCategory.UNKNOWN_ERROR: ErrorSeverity.HIGH,
}

# CLI exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class ErrorHandler:
    """Centralized error handling for server operations and CLI commands."""

    def __init__(self, logger: Optional[logging.Logger] = None):
        self.logger = logger or logging.getLogger(__name__)
        self.error_stats: Dict[str, int] = {code.value: 0 for code in ErrorCode}

    def classify(self, error: BaseException) -> Tuple[ErrorCode, ErrorCategory]:
        if isinstance(error, SpeechLMError):
            code = error.code
        elif isinstance(error, PydanticValidationError):
            code = ErrorCode.BAD_REQUEST
        elif isinstance(error, ValueError):
            code = ErrorCode.INVALID_ARGUMENT
        else:
            code = ErrorCode.INTERNAL
        if code == ErrorCode.INTERNAL and isinstance(error, (OSError, asyncio.TimeoutError)):
            return code, ErrorCategory.IO_ERROR
        return code, CATEGORY_BY_CODE.get(code, ErrorCategory.UNKNOWN_ERROR)

    def handle(self, error: BaseException, operation: str,
               context: Optional[Dict[str, Any]] = None) -> ErrorDetails:
        """Categorise, log and count ``error``; returns what to report."""
        code, category = self.classify(error)
        severity = SEVERITY_BY_CATEGORY[category]
        details = dict(error.details) if isinstance(error, SpeechLMError) else {}
        if context:
            details.update(context)
        result = ErrorDetails(
            code=code.value,
            message=self._message(error),
            category=category.value,
            severity=severity.value,
            operation=operation,
            details=details or None,
        )
        self._log_error(error, result)
        self.error_stats[code.value] += 1
        return result

    @staticmethod
    def _message(error: BaseException) -> str:
        if isinstance(error, SpeechLMError):
            return error.message
        if isinstance(error, PydanticValidationError):
            parts = []
            for item in error.errors():
                location = ".".join(str(p) for p in item.get("loc", ())) or "request"
                parts.append(f"{location}: {item.get('msg')}")
            return "; ".join(parts)
        return str(error) or type(error).__name__

    def _log_error(self, error: BaseException, details: ErrorDetails) -> None:
        message = f"Error in {details.operation}: {details.code}: {details.message}"
        if details.severity == ErrorSeverity.HIGH.value:
            self.logger.error(message, exc_info=not isinstance(error, SpeechLMError))
        elif details.severity == ErrorSeverity.MEDIUM.value:
            self.logger.warning(message)
        else:
            self.logger.info(message)

    @staticmethod
    def exit_code(error: BaseException) -> int:
        """1 for usage and validation problems, 2 for runtime failures."""
        if isinstance(error, PydanticValidationError):
            return EXIT_USAGE
        if isinstance(error, SpeechLMError):
            category = CATEGORY_BY_CODE.get(error.code)
            return EXIT_USAGE if category == ErrorCategory.VALIDATION_ERROR else EXIT_RUNTIME
        if isinstance(error, ValueError):
            return EXIT_USAGE
        return EXIT_RUNTIME

    def get_error_statistics(self) -> Dict[str, Any]:
        total_errors = sum(self.error_stats.values())
        nonzero = {code: count for code, count in self.error_stats.items() if count}
        return {
            "total_errors": total_errors,
            "error_breakdown": nonzero,
            "most_common_error": max(nonzero.items(), key=lambda x: x[1])[0] if nonzero else None,
        }

    def reset_statistics(self) -> None:
        self.error_stats = {code.value: 0 for code in ErrorCode}
