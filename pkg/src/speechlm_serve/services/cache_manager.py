"""Simple in-memory LRU cache for merged adapter weights and prompt embeddings."""

import threading
import time
from collections import OrderedDict
from typing import Any, Callable, Dict, Hashable, Optional


class CacheManager:
    """Bounded LRU cache with optional time-to-live."""

    def __init__(self, max_entries: int = 32, default_ttl: Optional[float] = None,
                 clock: Callable[[], float] = time.monotonic):
        """Initialize cache manager.

        Args:
            max_entries: Maximum number of entries kept; least recently used go first
            default_ttl: Default time-to-live in seconds, None for no expiry
            clock: Time source for expiry
        """
        self.max_entries = max_entries
        self.default_ttl = default_ttl
        self._clock = clock
        self._cache: "OrderedDict[Hashable, Dict[str, Any]]" = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, key: Hashable) -> Optional[Any]:
        """Get value from cache.

        Returns:
            Cached value or None if not found/expired
        """
        with self._lock:
            entry = self._cache.get(key)
            if entry is None:
                self.misses += 1
                return None
            if entry["expires"] is not None and self._clock() > entry["expires"]:
                del self._cache[key]
                self.misses += 1
                return None
            self._cache.move_to_end(key)
            self.hits += 1
            return entry["value"]

    def set(self, key: Hashable, value: Any, ttl: Optional[float] = None) -> None:
        """Set value in cache, evicting the least recently used entry when full."""
        if ttl is None:
            ttl = self.default_ttl
        with self._lock:
            self._cache[key] = {
                "value": value,
                "expires": self._clock() + ttl if ttl is not None else None,
            }
            self._cache.move_to_end(key)
            while len(self._cache) > self.max_entries:
                self._cache.popitem(last=False)

    def size(self) -> int:
        with self._lock:
            return len(self._cache)
