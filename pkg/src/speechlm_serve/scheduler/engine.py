"""
Continuous-batching engine.

Each step is either a prefill of one queued request or a decode step that
advances up to ``max_batch`` requests by one token, each row with its own
adapter stack. Prefill wins whenever a queued request fits in the free pages.

When the page pool runs dry mid-decode a victim chosen by the preempt policy
is evicted: its pages are freed, its generated tokens kept, and it goes back
to the queue. Its next prefill recomputes prefix plus generated tokens, so the
continuation is exactly the uninterrupted one.

Not thread-safe: one loop owns the engine and everything it touches.
"""

import itertools
import json
import logging
import time
from collections import OrderedDict
from typing import Callable, Dict, List, Optional, Union

from ..codeclm.decode import ModelParams, check_prefix, generate_next
from ..errors import (
    ErrorCode,
    InvalidArgumentError,
    OutOfPagesError,
    ResourceExhaustedError,
    SpeechLMError,
    UnknownAdapterError,
    UnknownSequenceError,
)
from ..kvcache import PagedKVCache
from ..tokenspace import E
from .policies import PreemptPolicy, get_policy
from .requests import (
    AdmissionResult,
    BatchPlan,
    EngineEvent,
    EventKind,
    Request,
    RequestPhase,
    RequestSnapshot,
    RequestState,
    StepKind,
)

logger = logging.getLogger(__name__)
event_logger = logging.getLogger("speechlm_serve.events")


class Engine:
    """Owns request records, the paged cache and step execution."""

    def __init__(self, params: ModelParams, cache: PagedKVCache, registry=None,
                 max_batch: int = 8, queue_capacity: int = 64,
                 preempt_policy: Union[PreemptPolicy, str] = PreemptPolicy.YOUNGEST_FIRST,
                 clock: Callable[[], float] = time.monotonic,
                 finished_capacity: int = 1024):
        if max_batch < 1:
            raise InvalidArgumentError(f"max_batch must be >= 1, got {max_batch}")
        if queue_capacity < 1:
            raise InvalidArgumentError(f"queue_capacity must be >= 1, got {queue_capacity}")
        self.params = params
        self.cache = cache
        self.registry = registry
        self.max_batch = max_batch
        self.queue_capacity = queue_capacity
        self.policy_name = PreemptPolicy(preempt_policy)
        self._policy = get_policy(self.policy_name)
        self._clock = clock
        self._active: Dict[str, RequestState] = {}
        self._finished: "OrderedDict[str, RequestSnapshot]" = OrderedDict()
        self._finished_capacity = finished_capacity
        self._pending: List[EngineEvent] = []
        self._order = itertools.count()
        self.step_count = 0
        self.stats = {
            "admitted": 0,
            "rejected": 0,
            "completed": 0,
            "failed": 0,
            "preemptions": 0,
            "prefill_steps": 0,
            "decode_steps": 0,
            "tokens_generated": 0,
        }

    # -- admission -------------------------------------------------------

    def admit(self, request: Request) -> AdmissionResult:
        """Queue ``request`` or say why not. Adapters are pinned here."""
        try:
            self._validate(request)
            adapters = self.registry.resolve(request.adapters) if request.adapters else []
        except UnknownAdapterError as e:
            return self._reject(request, ErrorCode.UNKNOWN_ADAPTER, e.message)
        except SpeechLMError as e:
            return self._reject(request, e.code, e.message)

        if self.queued_count >= self.queue_capacity:
            return self._reject(
                request, ErrorCode.QUEUE_FULL, f"queue is at capacity ({self.queue_capacity})"
            )
        state = RequestState(request, adapters, next(self._order), self._clock())
        self._active[request.id] = state
        self.stats["admitted"] += 1
        self._log_event({"request_id": request.id, "event": "admitted",
                         "prefix_len": len(request.prefix), "adapters": list(request.adapters)})
        logger.debug(f"Admitted request {request.id} ({len(request.prefix)} prefix tokens)")
        return AdmissionResult(request.id, True)

    def _validate(self, request: Request) -> None:
        if request.id in self._active or request.id in self._finished:
            raise InvalidArgumentError(f"duplicate request id {request.id!r}")
        config = self.params.config
        check_prefix(request.prefix, config.condition_len)
        if config.condition_len:
            shape = getattr(request.condition_embeddings, "shape", None)
            if shape != (config.condition_len, config.prompt_dim):
                raise InvalidArgumentError(
                    f"condition embeddings shape {shape} != "
                    f"({config.condition_len}, {config.prompt_dim})"
                )
        if request.adapters and self.registry is None:
            raise UnknownAdapterError(request.adapters[0])

    def _reject(self, request: Request, code: ErrorCode, message: str) -> AdmissionResult:
        self.stats["rejected"] += 1
        logger.warning(f"Rejected request {request.id}: {code.value}: {message}")
        self._log_event({"request_id": request.id, "event": "rejected", "error": code.value})
        return AdmissionResult(request.id, False, code, message)

    # -- planning --------------------------------------------------------

    def plan_step(self) -> Optional[BatchPlan]:
        """Prefill for the oldest queued request that fits, else a decode batch, else None."""
        for state in self._by_arrival(RequestPhase.QUEUED):
            needed = self.cache.pages_needed(state.positions)
            if needed > self.cache.config.num_pages:
                self._fail(state, ResourceExhaustedError(
                    f"request needs {needed} pages, pool holds {self.cache.config.num_pages}",
                    details={"pages_needed": needed},
                ), self._pending)
                continue
            if needed <= self.cache.pages_free:
                return BatchPlan(StepKind.PREFILL, (state.request_id,), (state.request.adapters,))

        decoding = self._by_arrival(RequestPhase.DECODE)[: self.max_batch]
        if decoding:
            return BatchPlan(
                StepKind.DECODE,
                tuple(s.request_id for s in decoding),
                tuple(s.request.adapters for s in decoding),
            )
        return None

    def _by_arrival(self, phase: RequestPhase) -> List[RequestState]:
        states = [s for s in self._active.values() if s.phase == phase]
        return sorted(states, key=lambda s: (s.arrival, s.order))

    # -- execution -------------------------------------------------------

    def execute_step(self, plan: BatchPlan) -> List[EngineEvent]:
        events: List[EngineEvent] = []
        if plan.kind == StepKind.PREFILL:
            self.stats["prefill_steps"] += 1
            self._prefill(self._active[plan.members[0]], events)
        else:
            self.stats["decode_steps"] += 1
            for request_id in plan.members:
                state = self._active.get(request_id)
                # Rows evicted or finished earlier in this step are skipped.
                if state is not None and state.phase == RequestPhase.DECODE:
                    self._decode_row(state, events)
        self.step_count += 1
        return events

    def _prefill(self, state: RequestState, events: List[EngineEvent]) -> None:
        state.transition(RequestPhase.PREFILL)
        params = state.request.decode_params
        if len(state.generated) >= params.max_new_tokens:
            self._complete(state, events)
            return
        self.cache.allocate_sequence(state.request_id)
        try:
            token = self._next_token(state)
        except OutOfPagesError as e:
            self._fail(state, ResourceExhaustedError(f"prefill ran out of pages: {e.message}"), events)
            return
        except Exception as e:
            self._fail(state, e, events)
            return
        state.transition(RequestPhase.DECODE)
        logger.debug(f"Prefilled request {state.request_id} ({state.positions} positions)")
        self._emit(state, token, events)

    def _decode_row(self, state: RequestState, events: List[EngineEvent]) -> None:
        while True:
            try:
                token = self._next_token(state)
            except OutOfPagesError:
                victim = self.preempt(state, events)
                if victim is None or victim is state:
                    return
                continue
            except Exception as e:
                self._fail(state, e, events)
                return
            self._emit(state, token, events)
            return

    def _next_token(self, state: RequestState) -> int:
        request = state.request
        return generate_next(
            self.params,
            state.adapters,
            request.condition_embeddings,
            state.token_ids,
            request.decode_params,
            len(state.generated),
            self.cache.handle(state.request_id),
        )

    def _emit(self, state: RequestState, token: int, events: List[EngineEvent]) -> None:
        if state.first_token_at is None:
            state.first_token_at = self._clock()
        if token == E:
            state.terminated = True
            self._complete(state, events)
            return
        state.generated.append(token)
        self.stats["tokens_generated"] += 1
        self._record(EngineEvent(EventKind.TOKEN, state.request_id, token=token), events)
        if len(state.generated) >= state.request.decode_params.max_new_tokens:
            self._complete(state, events)

    # -- preemption ------------------------------------------------------

    def preempt(self, trigger: RequestState, events: List[EngineEvent]) -> Optional[RequestState]:
        """Evict one decode-phase request to relieve page pressure.

        Returns the victim, or None when the trigger was the only candidate
        and has been failed with resource-exhausted instead.
        """
        candidates = self._by_arrival(RequestPhase.DECODE)
        if len(candidates) <= 1:
            self._fail(trigger, ResourceExhaustedError(
                f"request {trigger.request_id} needs more KV pages than the pool can give",
                details={"positions": trigger.positions},
            ), events)
            return None
        victim = self._policy(candidates)
        self._release_pages(victim)
        self.cache.record_eviction()
        victim.transition(RequestPhase.QUEUED)
        victim.preemptions += 1
        self.stats["preemptions"] += 1
        logger.warning(
            f"Preempted request {victim.request_id} after {len(victim.generated)} tokens "
            f"(policy={self.policy_name.value}, trigger={trigger.request_id})"
        )
        self._record(EngineEvent(EventKind.PREEMPTED, victim.request_id,
                                 snapshot=victim.snapshot()), events)
        return victim

    # -- completion ------------------------------------------------------

    def _release_pages(self, state: RequestState) -> None:
        if self.cache.has_sequence(state.request_id):
            self.cache.free_sequence(state.request_id)

    def _complete(self, state: RequestState, events: List[EngineEvent]) -> None:
        state.transition(RequestPhase.COMPLETE)
        self._finish(state)
        self.stats["completed"] += 1
        logger.debug(
            f"Completed request {state.request_id}: {len(state.generated)} tokens, "
            f"terminated={state.terminated}"
        )
        self._record(EngineEvent(EventKind.COMPLETED, state.request_id,
                                 snapshot=self._finished[state.request_id]), events)

    def _fail(self, state: RequestState, error: Exception, events: List[EngineEvent]) -> None:
        if isinstance(error, SpeechLMError):
            state.error = error.to_dict()
        else:
            state.error = {"code": ErrorCode.INTERNAL.value, "message": str(error)}
            logger.exception(f"Unexpected error in request {state.request_id}")
        state.transition(RequestPhase.FAILED)
        self._finish(state)
        self.stats["failed"] += 1
        logger.error(f"Request {state.request_id} failed: {state.error['code']}: "
                     f"{state.error['message']}")
        self._record(EngineEvent(EventKind.FAILED, state.request_id,
                                 snapshot=self._finished[state.request_id]), events)

    def _finish(self, state: RequestState) -> None:
        now = self._clock()
        state.completed_at = now
        if state.first_token_at is None:
            state.first_token_at = now
        self._release_pages(state)
        del self._active[state.request_id]
        self._finished[state.request_id] = state.snapshot()
        while len(self._finished) > self._finished_capacity:
            self._finished.popitem(last=False)

    # -- events ----------------------------------------------------------

    def _record(self, event: EngineEvent, events: List[EngineEvent]) -> None:
        events.append(event)
        level = logging.DEBUG if event.kind == EventKind.TOKEN else logging.INFO
        self._log_event(event.to_log(), level)

    @staticmethod
    def _log_event(entry: Dict[str, object], level: int = logging.INFO) -> None:
        if event_logger.isEnabledFor(level):
            event_logger.log(level, json.dumps({"ts": time.time(), **entry}, sort_keys=True))

    # -- driving ---------------------------------------------------------

    def step(self) -> List[EngineEvent]:
        """Plan and execute one step; also returns events queued between steps."""
        plan = self.plan_step()
        events, self._pending = self._pending, []
        if plan is not None:
            events.extend(self.execute_step(plan))
        return events

    def run_until_idle(self, max_steps: int = 100_000) -> List[EngineEvent]:
        events: List[EngineEvent] = []
        for _ in range(max_steps):
            if not self._active and not self._pending:
                break
            batch = self.step()
            if not batch:
                break
            events.extend(batch)
        return events

    def cancel(self, request_id: str) -> bool:
        """Fail an unfinished request (client went away); False if already finished."""
        state = self._active.get(request_id)
        if state is None:
            return False
        self._fail(state, SpeechLMError("request cancelled", code=ErrorCode.CANCELLED),
                   self._pending)
        return True

    # -- inspection ------------------------------------------------------

    def snapshot(self, request_id: str) -> RequestSnapshot:
        state = self._active.get(request_id)
        if state is not None:
            return state.snapshot()
        try:
            return self._finished[request_id]
        except KeyError:
            raise UnknownSequenceError(f"unknown request {request_id!r}") from None

    @property
    def queued_count(self) -> int:
        return sum(1 for s in self._active.values() if s.phase == RequestPhase.QUEUED)

    @property
    def decoding_count(self) -> int:
        return sum(1 for s in self._active.values() if s.phase == RequestPhase.DECODE)

    @property
    def has_work(self) -> bool:
        return bool(self._active) or bool(self._pending)

    def status(self) -> Dict[str, object]:
        return {
            "steps": self.step_count,
            "queued": self.queued_count,
            "decoding": self.decoding_count,
            "policy": self.policy_name.value,
            "cache": self.cache.stats().to_dict(),
            **self.stats,
        }
