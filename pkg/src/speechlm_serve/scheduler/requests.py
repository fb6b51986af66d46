"""
Request, state and plan types for the continuous-batching engine.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple
from uuid import uuid4

import numpy as np

from ..codeclm.lora import LoraAdapter
from ..codeclm.sampling import DecodeParams
from ..errors import ErrorCode, InvalidArgumentError
from ..tokenspace import ComposedSequence


class RequestPhase(str, Enum):
    """Request lifecycle phases"""
    QUEUED = "queued"
    PREFILL = "prefill"
    DECODE = "decode"
    COMPLETE = "complete"
    FAILED = "failed"

    @property
    def finished(self) -> bool:
        return self in (RequestPhase.COMPLETE, RequestPhase.FAILED)


# Allowed phase transitions; decode -> queued is preemption.
TRANSITIONS = {
    RequestPhase.QUEUED: {RequestPhase.PREFILL, RequestPhase.FAILED},
    RequestPhase.PREFILL: {RequestPhase.DECODE, RequestPhase.COMPLETE, RequestPhase.FAILED},
    RequestPhase.DECODE: {RequestPhase.DECODE, RequestPhase.QUEUED, RequestPhase.COMPLETE,
                          RequestPhase.FAILED},
    RequestPhase.COMPLETE: set(),
    RequestPhase.FAILED: set(),
}


class StepKind(str, Enum):
    PREFILL = "prefill"
    DECODE = "decode"


class EventKind(str, Enum):
    TOKEN = "token"
    COMPLETED = "completed"
    PREEMPTED = "preempted"
    FAILED = "failed"


@dataclass
class Request:
    """A synthesis request as handed to the engine."""
    prefix: ComposedSequence
    condition_embeddings: Optional[np.ndarray]
    decode_params: DecodeParams = field(default_factory=DecodeParams)
    adapters: Tuple[str, ...] = ()
    stream: bool = True
    id: str = field(default_factory=lambda: uuid4().hex[:12])


@dataclass
class RequestState:
    """Engine-side mutable record of one request."""
    request: Request
    adapters: List[LoraAdapter]
    order: int
    arrival: float
    phase: RequestPhase = RequestPhase.QUEUED
    generated: List[int] = field(default_factory=list)
    terminated: bool = False
    preemptions: int = 0
    first_token_at: Optional[float] = None
    completed_at: Optional[float] = None
    error: Optional[Dict[str, Any]] = None

    @property
    def request_id(self) -> str:
        return self.request.id

    @property
    def token_ids(self) -> List[int]:
        return list(self.request.prefix.token_ids) + self.generated

    @property
    def positions(self) -> int:
        """Positions the cache must hold before the next token is chosen."""
        return self.request.prefix.condition_len + len(self.request.prefix) + len(self.generated)

    def transition(self, phase: RequestPhase) -> None:
        if phase not in TRANSITIONS[self.phase]:
            raise InvalidArgumentError(
                f"request {self.request_id}: illegal transition {self.phase.value} -> {phase.value}"
            )
        self.phase = phase

    def snapshot(self) -> "RequestSnapshot":
        return RequestSnapshot(
            request_id=self.request_id,
            phase=self.phase,
            generated=tuple(self.generated),
            terminated=self.terminated,
            preemptions=self.preemptions,
            adapters=self.request.adapters,
            arrival=self.arrival,
            first_token_at=self.first_token_at,
            completed_at=self.completed_at,
            error=dict(self.error) if self.error else None,
        )


@dataclass(frozen=True)
class RequestSnapshot:
    """Immutable view of a request record handed across contexts."""
    request_id: str
    phase: RequestPhase
    generated: Tuple[int, ...]
    terminated: bool
    preemptions: int
    adapters: Tuple[str, ...]
    arrival: float
    first_token_at: Optional[float]
    completed_at: Optional[float]
    error: Optional[Dict[str, Any]] = None

    @property
    def finished(self) -> bool:
        return self.phase.finished

    def timings(self) -> Dict[str, Optional[float]]:
        first = self.first_token_at
        done = self.completed_at
        return {
            "arrival": self.arrival,
            "first_token": first,
            "completion": done,
            "first_token_ms": None if first is None else (first - self.arrival) * 1000.0,
            "total_ms": None if done is None else (done - self.arrival) * 1000.0,
        }


@dataclass(frozen=True)
class BatchPlan:
    kind: StepKind
    members: Tuple[str, ...]
    adapter_stacks: Tuple[Tuple[str, ...], ...]

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class EngineEvent:
    kind: EventKind
    request_id: str
    token: Optional[int] = None
    snapshot: Optional[RequestSnapshot] = None

    def to_log(self) -> Dict[str, Any]:
        entry: Dict[str, Any] = {"request_id": self.request_id, "event": self.kind.value}
        if self.token is not None:
            entry["token"] = self.token
        if self.snapshot is not None and self.kind != EventKind.TOKEN:
            entry["tokens"] = len(self.snapshot.generated)
            entry["preemptions"] = self.snapshot.preemptions
            if self.snapshot.error:
                entry["error"] = self.snapshot.error.get("code")
        return entry


@dataclass(frozen=True)
class AdmissionResult:
    request_id: str
    accepted: bool
    code: Optional[ErrorCode] = None
    message: str = ""

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {"request_id": self.request_id, "accepted": self.accepted}
        if not self.accepted:
            payload["code"] = self.code.value if self.code else ErrorCode.INTERNAL.value
            payload["message"] = self.message
        return payload
