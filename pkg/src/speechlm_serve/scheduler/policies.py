"""Victim selection policies used when the KV page pool runs dry."""

from enum import Enum
from typing import Callable, Dict, Sequence

from ..errors import InvalidArgumentError
from .requests import RequestState

VictimPolicy = Callable[[Sequence[RequestState]], RequestState]


class PreemptPolicy(str, Enum):
    """Named victim policies"""
    YOUNGEST_FIRST = "youngest_first"
    OLDEST_FIRST = "oldest_first"


def youngest_first(candidates: Sequence[RequestState]) -> RequestState:
    """Evict the latest arrival."""
    return max(candidates, key=lambda s: (s.arrival, s.order))


def oldest_first(candidates: Sequence[RequestState]) -> RequestState:
    return min(candidates, key=lambda s: (s.arrival, s.order))


POLICIES: Dict[PreemptPolicy, VictimPolicy] = {
    PreemptPolicy.YOUNGEST_FIRST: youngest_first,
    PreemptPolicy.OLDEST_FIRST: oldest_first,
}


def get_policy(name) -> VictimPolicy:
    try:
        return POLICIES[PreemptPolicy(name)]
    except ValueError:
        raise InvalidArgumentError(
            f"unknown preempt policy {name!r}; available: {[p.value for p in PreemptPolicy]}"
        ) from None
