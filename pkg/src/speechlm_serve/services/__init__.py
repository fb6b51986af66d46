"""Services package for the synthesis engine and server."""

from .cache_manager import CacheManager
from .error_handler import ErrorCategory, ErrorHandler, ErrorSeverity

__all__ = [
    'CacheManager',
    'ErrorCategory',
    'ErrorHandler',
    'ErrorSeverity',
]
