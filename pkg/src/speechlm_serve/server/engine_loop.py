"""
Engine loop for the synthesis server.

Owns the scheduling engine on behalf of every connection. Connection
handlers submit requests through a queue and receive engine events on a
per-request queue; the engine itself only runs inside this worker, one step
at a time, with the numeric work off the event loop.
"""

import asyncio
import logging
import sys
import time
import traceback
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Set, Tuple

from ..errors import ErrorCode
from ..scheduler import AdmissionResult, Engine, EngineEvent, EventKind, Request
from .metrics import Metrics

logger = logging.getLogger(__name__)


def safe_log(level: int, message: str, *args, **kwargs):
    """Safe logging that prevents errors during shutdown when streams are closed."""
    try:
        if hasattr(sys.stdout, "closed") and sys.stdout.closed:
            return
        if hasattr(sys.stderr, "closed") and sys.stderr.closed:
            return
        logger.log(level, message, *args, **kwargs)
    except (ValueError, OSError):
        pass


@dataclass
class Submission:
    """A request waiting to be handed to the engine"""
    request: Request
    future: "asyncio.Future[AdmissionResult]"
    events: "asyncio.Queue[EngineEvent]"
    submitted_at: float = field(default_factory=time.monotonic)


class EngineLoop:
    """
    Async worker that drives the engine step by step.

    Admissions and cancellations are applied between steps; each step runs in
    a worker thread and its events are fanned out to the requests' queues.
    """

    def __init__(self, engine: Engine, metrics: Optional[Metrics] = None,
                 idle_poll: float = 0.05):
        """
        Initialize the engine loop.

        Args:
            engine: The engine to drive; nothing else may touch it once started
            metrics: Service counters updated from engine events
            idle_poll: Seconds to wait for a submission while the engine is idle
        """
        self.engine = engine
        self.metrics = metrics or Metrics()
        self.idle_poll = idle_poll
        self._submissions: Optional[asyncio.Queue] = None
        self._streams: Dict[str, asyncio.Queue] = {}
        self._cancels: Set[str] = set()
        self._worker_task: Optional[asyncio.Task] = None
        self._shutdown_event: Optional[asyncio.Event] = None
        self._status: Dict[str, Any] = engine.status()
        self._stats = {
            "submitted": 0,
            "steps": 0,
            "events": 0,
            "cancelled": 0,
            "step_errors": 0,
        }

    @property
    def running(self) -> bool:
        return self._worker_task is not None and not self._worker_task.done()

    @property
    def stopping(self) -> bool:
        return self._shutdown_event is not None and self._shutdown_event.is_set()

    async def start(self):
        """Start the engine worker"""
        if self.running:
            logger.warning("Engine loop already running")
            return

        self._submissions = asyncio.Queue()
        self._shutdown_event = asyncio.Event()
        self._worker_task = asyncio.create_task(self._worker())
        logger.info("Engine loop started")

    async def stop(self, timeout: float = 10.0):
        """Stop accepting work, drain in-flight requests, then stop the worker"""
        if not self._worker_task:
            return

        self._shutdown_event.set()

        try:
            await asyncio.wait_for(self._worker_task, timeout=timeout)
        except asyncio.TimeoutError:
            logger.warning("Engine loop did not drain in time, cancelling")
            self._worker_task.cancel()
            try:
                await self._worker_task
            except asyncio.CancelledError:
                pass
        finally:
            self._abandon_streams()

        safe_log(logging.INFO, "Engine loop stopped")

    async def submit(self, request: Request) -> Tuple[AdmissionResult, "asyncio.Queue[EngineEvent]"]:
        """
        Hand ``request`` to the engine.

        Returns:
            The admission result and the queue that receives the request's events
        """
        events: asyncio.Queue = asyncio.Queue()
        if not self.running or self.stopping:
            result = AdmissionResult(request.id, False, ErrorCode.RESOURCE_EXHAUSTED,
                                     "server is shutting down")
            self.metrics.record_rejected(result.code.value)
            return result, events

        future = asyncio.get_running_loop().create_future()
        await self._submissions.put(Submission(request, future, events))
        self._stats["submitted"] += 1
        return await future, events

    def cancel(self, request_id: str) -> None:
        """Cancel a request whose client went away; applied before the next step."""
        if request_id in self._streams:
            self._cancels.add(request_id)

    def get_status(self) -> Dict[str, Any]:
        """Engine status as of the last completed step"""
        return {
            "running": self.running,
            "stopping": self.stopping,
            "open_streams": len(self._streams),
            "engine": dict(self._status),
            "statistics": self._stats.copy(),
        }

    async def _worker(self):
        """Main worker loop: admit, cancel, step, dispatch"""
        try:
            while True:
                self._drain_submissions()
                self._apply_cancellations()

                if self.engine.has_work:
                    try:
                        events, status = await asyncio.to_thread(self._step)
                    except Exception as e:
                        self._stats["step_errors"] += 1
                        logger.error(f"Unexpected error in engine step: {e}")
                        logger.debug(traceback.format_exc())
                        continue
                    self._status = status
                    self._dispatch(events)
                    continue

                if self._shutdown_event.is_set() and self._submissions.empty():
                    break

                try:
                    submission = await asyncio.wait_for(
                        self._submissions.get(), timeout=self.idle_poll
                    )
                except asyncio.TimeoutError:
                    continue
                self._admit(submission)

        except asyncio.CancelledError:
            safe_log(logging.INFO, "Engine loop cancelled")
        finally:
            safe_log(logging.INFO, "Engine loop worker exited")

    def _step(self) -> Tuple[List[EngineEvent], Dict[str, Any]]:
        # Runs in a worker thread; the event loop does not touch the engine meanwhile.
        events = self.engine.step()
        return events, self.engine.status()

    def _drain_submissions(self) -> None:
        while not self._submissions.empty():
            self._admit(self._submissions.get_nowait())

    def _admit(self, submission: Submission) -> None:
        request = submission.request
        try:
            result = self.engine.admit(request)
        except Exception as e:
            logger.exception(f"Admission of request {request.id} failed")
            result = AdmissionResult(request.id, False, ErrorCode.INTERNAL, str(e))
        if result.accepted:
            self._streams[request.id] = submission.events
            self.metrics.record_admitted()
            wait_ms = (time.monotonic() - submission.submitted_at) * 1000.0
            logger.debug(f"Request {request.id} admitted after {wait_ms:.2f} ms")
        else:
            self.metrics.record_rejected(result.code.value if result.code else ErrorCode.INTERNAL.value)
        if not submission.future.done():
            submission.future.set_result(result)

    def _apply_cancellations(self) -> None:
        while self._cancels:
            request_id = self._cancels.pop()
            if self.engine.cancel(request_id):
                self._stats["cancelled"] += 1
                logger.info(f"Cancelled request {request_id}")

    def _dispatch(self, events: List[EngineEvent]) -> None:
        self._stats["steps"] += 1
        for event in events:
            self._stats["events"] += 1
            if event.kind == EventKind.TOKEN:
                self.metrics.record_tokens()
            elif event.kind == EventKind.PREEMPTED:
                self.metrics.record_preemption()
            elif event.kind == EventKind.COMPLETED:
                self.metrics.record_completed()
            elif event.kind == EventKind.FAILED:
                error = event.snapshot.error if event.snapshot is not None else None
                self.metrics.record_failed((error or {}).get("code", ErrorCode.INTERNAL.value))

            queue = self._streams.get(event.request_id)
            if queue is not None:
                queue.put_nowait(event)
            if event.kind in (EventKind.COMPLETED, EventKind.FAILED):
                self._streams.pop(event.request_id, None)
                self._cancels.discard(event.request_id)

    def _abandon_streams(self) -> None:
        """Unblock handlers whose requests will never finish."""
        for request_id, queue in self._streams.items():
            queue.put_nowait(EngineEvent(EventKind.FAILED, request_id))
        self._streams.clear()
