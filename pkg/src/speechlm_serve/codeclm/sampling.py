"""
Token selection: greedy argmax and seeded top-k sampling.

Candidates are restricted to the codec range plus the end identifier E when
``codec_only`` is set. Sampling at step ``n`` draws from a generator seeded
with ``(rng_seed, n)``, so a request that is preempted and resumed draws the
same numbers as one that never was.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from ..errors import InvalidArgumentError, NumericError
from ..tokenspace import E, VocabLayout

DEFAULT_MAX_NEW_TOKENS = 256
MAX_NEW_TOKENS_LIMIT = 1024


class DecodeMode(str, Enum):
    GREEDY = "greedy"
    SAMPLED = "sampled"


@dataclass(frozen=True)
class DecodeParams:
    mode: DecodeMode = DecodeMode.GREEDY
    temperature: float = 1.0
    top_k: int = 50
    rng_seed: int = 0
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS
    codec_only: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", DecodeMode(self.mode))
        if not 0 <= self.max_new_tokens <= MAX_NEW_TOKENS_LIMIT:
            raise InvalidArgumentError(
                f"max_new_tokens must be in [0, {MAX_NEW_TOKENS_LIMIT}], got {self.max_new_tokens}"
            )
        if self.mode == DecodeMode.SAMPLED:
            if not (self.temperature > 0 and np.isfinite(self.temperature)):
                raise InvalidArgumentError(f"temperature must be > 0, got {self.temperature}")
            if self.top_k < 1:
                raise InvalidArgumentError(f"top_k must be >= 1, got {self.top_k}")
        if self.rng_seed < 0:
            raise InvalidArgumentError(f"rng_seed must be >= 0, got {self.rng_seed}")

    @classmethod
    def greedy(cls, max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS) -> "DecodeParams":
        return cls(mode=DecodeMode.GREEDY, max_new_tokens=max_new_tokens)

    @classmethod
    def sampled(cls, rng_seed: int, temperature: float = 1.0, top_k: int = 50,
                max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS) -> "DecodeParams":
        return cls(mode=DecodeMode.SAMPLED, temperature=temperature, top_k=top_k,
                   rng_seed=rng_seed, max_new_tokens=max_new_tokens)

    def to_dict(self):
        return {
            "mode": self.mode.value,
            "temperature": self.temperature,
            "top_k": self.top_k,
            "rng_seed": self.rng_seed,
            "max_new_tokens": self.max_new_tokens,
            "codec_only": self.codec_only,
        }


def candidate_ids(layout: VocabLayout, codec_only: bool = True) -> Optional[np.ndarray]:
    """Ascending ids eligible for selection, or None for the whole vocabulary."""
    if not codec_only:
        return None
    return np.concatenate(
        [[E], np.arange(layout.codec_start, layout.total_size)]
    ).astype(np.int64)


def _restrict(logits: np.ndarray, allowed: Optional[np.ndarray]):
    logits = np.asarray(logits)
    if logits.ndim != 1 or logits.size == 0:
        raise InvalidArgumentError(f"logits must be a non-empty vector, got shape {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise NumericError("logits contain NaN or infinite values")
    if allowed is None:
        return logits, np.arange(logits.size)
    return logits[allowed], allowed


def greedy_step(logits: np.ndarray, allowed: Optional[np.ndarray] = None) -> int:
    """Index of the maximum logit; ties go to the lowest id."""
    values, ids = _restrict(logits, allowed)
    return int(ids[int(np.argmax(values))])


def step_rng(rng_seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([rng_seed, step])


def sample_step(logits: np.ndarray, params: DecodeParams,
                rng: Optional[np.random.Generator] = None, step: int = 0,
                allowed: Optional[np.ndarray] = None) -> int:
    """Draw from softmax(logits / temperature) over the ``top_k`` best candidates.

    ``top_k == 1`` reduces to ``greedy_step``.
    """
    values, ids = _restrict(logits, allowed)
    if params.top_k > np.asarray(logits).size:
        raise InvalidArgumentError(
            f"top_k ({params.top_k}) exceeds vocabulary size ({np.asarray(logits).size})"
        )
    k = min(params.top_k, values.size)
    order = np.argsort(-values, kind="stable")[:k]
    if k == 1:
        return int(ids[order[0]])

    scaled = values[order].astype(np.float64) / params.temperature
    scaled -= scaled.max()
    probs = np.exp(scaled)
    probs /= probs.sum()
    if rng is None:
        rng = step_rng(params.rng_seed, step)
    u = rng.random()
    pick = min(int(np.searchsorted(np.cumsum(probs), u, side="right")), k - 1)
    return int(ids[order[pick]])


def select_token(logits: np.ndarray, params: DecodeParams, step: int,
                 allowed: Optional[np.ndarray] = None) -> int:
    if params.mode == DecodeMode.GREEDY:
        return greedy_step(logits, allowed)
    return sample_step(logits, params, step=step, allowed=allowed)
