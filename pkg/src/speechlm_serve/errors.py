"""
Error types for the codec-LM inference engine and streaming service.

Every failure the engine can report carries an ``ErrorCode`` whose value is
the code string sent on the wire inside ``0x7F`` error frames.
"""

from enum import Enum
from typing import Any, Dict, Optional


class ErrorCode(str, Enum):
    """Wire-level error codes"""
    INVALID_ARGUMENT = "invalid-argument"
    NUMERIC_ERROR = "numeric-error"
    BAD_REQUEST = "bad-request"
    UNKNOWN_ADAPTER = "unknown-adapter"
    QUEUE_FULL = "queue-full"
    RESOURCE_EXHAUSTED = "resource-exhausted"
    BAD_CONTAINER = "bad-container"
    POSITION_OVERFLOW = "position-overflow"
    CACHE_INCONSISTENT = "cache-inconsistent"
    OUT_OF_PAGES = "out-of-pages"
    DUPLICATE_SEQUENCE = "duplicate-sequence"
    UNKNOWN_SEQUENCE = "unknown-sequence"
    FRAME_TOO_LARGE = "frame-too-large"
    MALFORMED_FRAME = "malformed-frame"
    INCOMPLETE_FRAME = "incomplete-frame"
    SCHEMA_ERROR = "schema-error"
    CANCELLED = "cancelled"
    INTERNAL = "internal"


class SpeechLMError(Exception):
    """Base class for all engine errors."""

    code: ErrorCode = ErrorCode.INTERNAL

    def __init__(self, message: str, code: Optional[ErrorCode] = None,
                 details: Optional[Dict[str, Any]] = None):
        if code is not None:
            self.code = code
        self.message = message
        self.details = details or {}
        super().__init__(message)

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {"code": self.code.value, "message": self.message}
        if self.details:
            payload["details"] = self.details
        return payload


class InvalidArgumentError(SpeechLMError, ValueError):
    code = ErrorCode.INVALID_ARGUMENT


class NumericError(SpeechLMError, ArithmeticError):
    code = ErrorCode.NUMERIC_ERROR


class PositionOverflowError(SpeechLMError):
    code = ErrorCode.POSITION_OVERFLOW


class CacheInconsistencyError(SpeechLMError):
    code = ErrorCode.CACHE_INCONSISTENT


class OutOfPagesError(SpeechLMError):
    """Raised by the paged cache when the free list is empty.

    This is a signal, not a failure: the scheduler reacts by preempting.
    """
    code = ErrorCode.OUT_OF_PAGES


class DuplicateSequenceError(SpeechLMError):
    code = ErrorCode.DUPLICATE_SEQUENCE


class UnknownSequenceError(SpeechLMError):
    code = ErrorCode.UNKNOWN_SEQUENCE


class UnknownAdapterError(SpeechLMError):
    code = ErrorCode.UNKNOWN_ADAPTER

    def __init__(self, name: str):
        super().__init__(f"unknown adapter: {name!r}", details={"adapter": name})
        self.name = name


class QueueFullError(SpeechLMError):
    code = ErrorCode.QUEUE_FULL


class ResourceExhaustedError(SpeechLMError):
    code = ErrorCode.RESOURCE_EXHAUSTED


class BadContainerError(SpeechLMError):
    code = ErrorCode.BAD_CONTAINER


class ProtocolError(SpeechLMError):
    code = ErrorCode.MALFORMED_FRAME


class FrameTooLargeError(ProtocolError):
    code = ErrorCode.FRAME_TOO_LARGE


class MalformedFrameError(ProtocolError):
    code = ErrorCode.MALFORMED_FRAME


class IncompleteFrameError(ProtocolError):
    code = ErrorCode.INCOMPLETE_FRAME


class SchemaError(SpeechLMError):
    """Input file record that does not match its schema."""
    code = ErrorCode.SCHEMA_ERROR

    def __init__(self, path: str, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}",
                         details={"path": path, "line": line})
        self.path = path
        self.line = line
