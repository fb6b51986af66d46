"""
Service counters and the first-packet latency histogram.

Counters only ever increase. Each update takes the lock; snapshots are
consistent per field, not across fields.
"""

import bisect
import threading
import time
from typing import Any, Callable, Dict, List, Optional, Sequence

LATENCY_BUCKETS_MS = (1, 2, 5, 10, 20, 50, 100, 200, 300, 500, 1000)


class LatencyHistogram:
    """Counts per bucket ``value <= edge``, plus one overflow bucket."""

    def __init__(self, edges: Sequence[float] = LATENCY_BUCKETS_MS):
        self.edges = tuple(edges)
        self.counts: List[int] = [0] * (len(self.edges) + 1)
        self.total = 0
        self.sum_ms = 0.0
        self.max_ms = 0.0

    def observe(self, value_ms: float) -> None:
        self.counts[bisect.bisect_left(self.edges, value_ms)] += 1
        self.total += 1
        self.sum_ms += value_ms
        self.max_ms = max(self.max_ms, value_ms)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "edges_ms": list(self.edges),
            "counts": list(self.counts),
            "total": self.total,
            "mean_ms": self.sum_ms / self.total if self.total else 0.0,
            "max_ms": self.max_ms,
        }


class Metrics:
    def __init__(self, clock: Callable[[], float] = time.monotonic):
        self._lock = threading.Lock()
        self._clock = clock
        self._started = clock()
        self.admitted = 0
        self.rejected = 0
        self.completed = 0
        self.failed = 0
        self.tokens_generated = 0
        self.preemptions = 0
        self.first_packet = LatencyHistogram()
        self.errors_by_code: Dict[str, int] = {}

    def record_admitted(self) -> None:
        with self._lock:
            self.admitted += 1

    def record_rejected(self, code: str) -> None:
        with self._lock:
            self.rejected += 1
            self.errors_by_code[code] = self.errors_by_code.get(code, 0) + 1

    def record_tokens(self, count: int = 1) -> None:
        with self._lock:
            self.tokens_generated += count

    def record_preemption(self) -> None:
        with self._lock:
            self.preemptions += 1

    def record_completed(self) -> None:
        with self._lock:
            self.completed += 1

    def record_failed(self, code: str) -> None:
        with self._lock:
            self.failed += 1
            self.errors_by_code[code] = self.errors_by_code.get(code, 0) + 1

    def record_first_packet(self, latency_ms: float) -> None:
        with self._lock:
            self.first_packet.observe(latency_ms)

    def snapshot(self, cache_stats: Optional[Dict[str, Any]] = None,
                 extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        with self._lock:
            uptime = max(self._clock() - self._started, 1e-9)
            data: Dict[str, Any] = {
                "requests": {
                    "admitted": self.admitted,
                    "rejected": self.rejected,
                    "completed": self.completed,
                    "failed": self.failed,
                },
                "tokens_generated": self.tokens_generated,
                "tokens_per_second": self.tokens_generated / uptime,
                "preemptions": self.preemptions,
                "first_packet_latency": self.first_packet.to_dict(),
                "errors_by_code": dict(self.errors_by_code),
                "uptime_s": uptime,
            }
        data["cache"] = dict(cache_stats) if cache_stats else {}
        if extra:
            data.update(extra)
        return data
