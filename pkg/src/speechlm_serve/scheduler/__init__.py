"""Continuous-batching scheduler with prefill/decode phases and preemption."""

from .engine import Engine
from .policies import POLICIES, PreemptPolicy, get_policy, oldest_first, youngest_first
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

__all__ = [
    "POLICIES",
    "AdmissionResult",
    "BatchPlan",
    "Engine",
    "EngineEvent",
    "EventKind",
    "PreemptPolicy",
    "Request",
    "RequestPhase",
    "RequestSnapshot",
    "RequestState",
    "StepKind",
    "get_policy",
    "oldest_first",
    "youngest_first",
]
