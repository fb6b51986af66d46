"""
Paged key/value cache for the decode phase.

KV payloads live in a single pool of fixed-size pages. Each sequence owns a
block table listing its pages in logical order; position ``p`` lives in
``pages[p // page_size]`` at offset ``p % page_size``. Attention reads a
contiguous copy of the sequence (gather-then-attend), which is bit-identical
to what a contiguous cache holds.

The free list is LIFO, so page-id assignment is deterministic.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Optional, Protocol, Tuple

import numpy as np

from .errors import (
    CacheInconsistencyError,
    DuplicateSequenceError,
    InvalidArgumentError,
    OutOfPagesError,
    PositionOverflowError,
    UnknownSequenceError,
)

logger = logging.getLogger(__name__)


class KVHandle(Protocol):
    """What a forward pass needs from a cache: append and read back."""

    @property
    def length(self) -> int: ...

    def append(self, payload: np.ndarray) -> int: ...

    def view(self, upto: int) -> np.ndarray: ...


@dataclass(frozen=True)
class PageConfig:
    payload_shape: Tuple[int, ...]
    page_size: int = 16
    num_pages: int = 512

    def __post_init__(self):
        if self.page_size < 1:
            raise InvalidArgumentError(f"page_size must be >= 1, got {self.page_size}")
        if self.num_pages < 1:
            raise InvalidArgumentError(f"num_pages must be >= 1, got {self.num_pages}")

    def pages_for(self, tokens: int) -> int:
        return -(-tokens // self.page_size)


@dataclass
class BlockTable:
    seq_id: Hashable
    pages: List[int] = field(default_factory=list)
    filled_tokens: int = 0

    def locate(self, position: int, page_size: int) -> Tuple[int, int]:
        """Logical position -> (page id, offset)."""
        return self.pages[position // page_size], position % page_size


@dataclass(frozen=True)
class CacheStats:
    pages_total: int
    pages_free: int
    pages_per_sequence: Dict[Hashable, int]
    eviction_count: int

    @property
    def pages_used(self) -> int:
        return sum(self.pages_per_sequence.values())

    def to_dict(self) -> Dict[str, object]:
        return {
            "pages_total": self.pages_total,
            "pages_free": self.pages_free,
            "pages_used": self.pages_used,
            "sequences": len(self.pages_per_sequence),
            "eviction_count": self.eviction_count,
        }


class PagedKVCache:
    """Fixed pool of KV pages addressed through per-sequence block tables.

    Owned by one scheduler; all mutations happen on its execution context.
    """

    def __init__(self, config: PageConfig, dtype=np.float32):
        self.config = config
        self._pool = np.zeros(
            (config.num_pages, config.page_size) + tuple(config.payload_shape), dtype=dtype
        )
        # LIFO: pop() hands out page 0 first on a fresh cache.
        self._free: List[int] = list(range(config.num_pages - 1, -1, -1))
        self._tables: Dict[Hashable, BlockTable] = {}
        self._eviction_count = 0
        logger.debug(
            f"Paged KV cache: {config.num_pages} pages x {config.page_size} tokens, "
            f"payload {config.payload_shape}"
        )

    @property
    def page_size(self) -> int:
        return self.config.page_size

    @property
    def pages_free(self) -> int:
        return len(self._free)

    def allocate_sequence(self, seq_id: Hashable) -> BlockTable:
        if seq_id in self._tables:
            raise DuplicateSequenceError(f"sequence {seq_id!r} already allocated")
        table = BlockTable(seq_id)
        self._tables[seq_id] = table
        return table

    def block_table(self, seq_id: Hashable) -> BlockTable:
        try:
            return self._tables[seq_id]
        except KeyError:
            raise UnknownSequenceError(f"sequence {seq_id!r} is not allocated") from None

    def has_sequence(self, seq_id: Hashable) -> bool:
        return seq_id in self._tables

    def length(self, seq_id: Hashable) -> int:
        return self.block_table(seq_id).filled_tokens

    def append_kv(self, seq_id: Hashable, payload: np.ndarray) -> int:
        """Store ``payload`` at the next logical position and return that position.

        Raises:
            OutOfPagesError: when a new page is needed and the pool is empty
        """
        table = self.block_table(seq_id)
        if payload.shape != tuple(self.config.payload_shape):
            raise CacheInconsistencyError(
                f"payload shape {payload.shape} != {tuple(self.config.payload_shape)}"
            )
        position = table.filled_tokens
        if position % self.page_size == 0:
            if not self._free:
                raise OutOfPagesError(
                    f"no free pages for sequence {seq_id!r} at position {position}",
                    details={"seq_id": str(seq_id), "position": position},
                )
            table.pages.append(self._free.pop())
        page, offset = table.locate(position, self.page_size)
        self._pool[page, offset] = payload
        table.filled_tokens += 1
        return position

    def gather(self, seq_id: Hashable, upto_position: int) -> np.ndarray:
        """Contiguous copy of positions ``[0, upto_position)`` in logical order."""
        table = self.block_table(seq_id)
        if not 0 <= upto_position <= table.filled_tokens:
            raise PositionOverflowError(
                f"gather up to {upto_position} but sequence {seq_id!r} holds "
                f"{table.filled_tokens} tokens"
            )
        if upto_position == 0:
            return np.empty((0,) + tuple(self.config.payload_shape), dtype=self._pool.dtype)
        n_pages = self.config.pages_for(upto_position)
        pages = self._pool[table.pages[:n_pages]]
        flat = pages.reshape((n_pages * self.page_size,) + tuple(self.config.payload_shape))
        return flat[:upto_position]

    def free_sequence(self, seq_id: Hashable) -> int:
        """Return every page of ``seq_id`` to the free list."""
        table = self._tables.pop(seq_id, None)
        if table is None:
            raise UnknownSequenceError(f"sequence {seq_id!r} is not allocated")
        self._free.extend(reversed(table.pages))
        logger.debug(f"Freed {len(table.pages)} pages of sequence {seq_id!r}")
        return len(table.pages)

    def record_eviction(self) -> None:
        self._eviction_count += 1

    def pages_needed(self, tokens: int) -> int:
        return self.config.pages_for(tokens)

    def can_fit(self, tokens: int) -> bool:
        return self.pages_needed(tokens) <= len(self._free)

    def stats(self) -> CacheStats:
        return CacheStats(
            pages_total=self.config.num_pages,
            pages_free=len(self._free),
            pages_per_sequence={k: len(t.pages) for k, t in self._tables.items()},
            eviction_count=self._eviction_count,
        )

    def handle(self, seq_id: Hashable) -> "SequenceHandle":
        self.block_table(seq_id)
        return SequenceHandle(self, seq_id)


class SequenceHandle:
    """KVHandle view of one sequence inside a paged cache."""

    def __init__(self, cache: PagedKVCache, seq_id: Hashable):
        self.cache = cache
        self.seq_id = seq_id

    @property
    def length(self) -> int:
        return self.cache.length(self.seq_id)

    def append(self, payload: np.ndarray) -> int:
        return self.cache.append_kv(self.seq_id, payload)

    def view(self, upto: int) -> np.ndarray:
        return self.cache.gather(self.seq_id, upto)


class ContiguousKVCache:
    """Reference cache holding one sequence in a single growing buffer."""

    def __init__(self, payload_shape: Tuple[int, ...], capacity: int = 64,
                 max_positions: Optional[int] = None, dtype=np.float32):
        self.payload_shape = tuple(payload_shape)
        self.max_positions = max_positions
        self._buffer = np.zeros((max(capacity, 1),) + self.payload_shape, dtype=dtype)
        self._length = 0

    @property
    def length(self) -> int:
        return self._length

    def append(self, payload: np.ndarray) -> int:
        if payload.shape != self.payload_shape:
            raise CacheInconsistencyError(
                f"payload shape {payload.shape} != {self.payload_shape}"
            )
        if self.max_positions is not None and self._length >= self.max_positions:
            raise PositionOverflowError(f"contiguous cache full at {self._length} positions")
        if self._length == self._buffer.shape[0]:
            grown = np.zeros((2 * self._length,) + self.payload_shape, dtype=self._buffer.dtype)
            grown[: self._length] = self._buffer
            self._buffer = grown
        self._buffer[self._length] = payload
        self._length += 1
        return self._length - 1

    def view(self, upto: int) -> np.ndarray:
        if not 0 <= upto <= self._length:
            raise PositionOverflowError(f"view up to {upto} but cache holds {self._length}")
        return self._buffer[:upto].copy()

    def truncate(self, length: int) -> None:
        if not 0 <= length <= self._length:
            raise PositionOverflowError(f"cannot truncate to {length}")
        self._length = length
