"""
Named LoRA adapter registry with hot load/unload.

Requests resolve adapter names to ``LoraAdapter`` objects when they are
admitted and keep those objects; unloading or replacing a name only affects
requests admitted afterwards.
"""

import logging
import threading
from pathlib import Path
from typing import Dict, Iterable, List, Union

from ..codeclm.lora import KIND_ORDER, LoraAdapter, decode_adapter, load_adapter
from ..codeclm.params import ModelConfig
from ..errors import InvalidArgumentError, UnknownAdapterError

logger = logging.getLogger(__name__)


class AdapterRegistry:
    """Thread-safe name -> adapter map with a load/unload epoch counter."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self._adapters: Dict[str, LoraAdapter] = {}
        self._lock = threading.Lock()
        self._epoch = 0

    @property
    def epoch(self) -> int:
        return self._epoch

    def __contains__(self, name: str) -> bool:
        with self._lock:
            return name in self._adapters

    def __len__(self) -> int:
        with self._lock:
            return len(self._adapters)

    def load(self, adapter: LoraAdapter) -> LoraAdapter:
        """Register ``adapter`` under its name, replacing any previous version."""
        adapter.validate_against(self.config)
        with self._lock:
            replaced = self._adapters.get(adapter.name)
            self._adapters[adapter.name] = adapter
            self._epoch += 1
            epoch = self._epoch
        action = "Replaced" if replaced is not None else "Loaded"
        logger.info(
            f"{action} adapter {adapter.name!r} (kind={adapter.kind.value}, rank={adapter.rank}, "
            f"epoch={epoch})"
        )
        return adapter

    def load_blob(self, blob: bytes) -> LoraAdapter:
        return self.load(decode_adapter(blob, self.config))

    def load_path(self, path: Union[str, Path]) -> LoraAdapter:
        try:
            adapter = load_adapter(path, self.config)
        except OSError as e:
            raise InvalidArgumentError(f"cannot read adapter file {path}: {e.strerror or e}",
                                       details={"path": str(path)}) from None
        return self.load(adapter)

    def unload(self, name: str) -> LoraAdapter:
        with self._lock:
            adapter = self._adapters.pop(name, None)
            if adapter is None:
                raise UnknownAdapterError(name)
            self._epoch += 1
            epoch = self._epoch
        logger.info(f"Unloaded adapter {name!r} (epoch={epoch})")
        return adapter

    def get(self, name: str) -> LoraAdapter:
        with self._lock:
            adapter = self._adapters.get(name)
        if adapter is None:
            raise UnknownAdapterError(name)
        return adapter

    def resolve(self, names: Iterable[str]) -> List[LoraAdapter]:
        """Adapters for ``names``, at most one per kind, in application order.

        Raises:
            UnknownAdapterError: a name is not loaded
            InvalidArgumentError: two adapters of the same kind
        """
        adapters = [self.get(name) for name in names]
        seen = {}
        for adapter in adapters:
            if adapter.kind in seen:
                raise InvalidArgumentError(
                    f"adapters {seen[adapter.kind]!r} and {adapter.name!r} are both "
                    f"{adapter.kind.value} adapters; at most one per kind"
                )
            seen[adapter.kind] = adapter.name
        return sorted(adapters, key=lambda a: KIND_ORDER[a.kind])

    def describe(self) -> List[Dict[str, object]]:
        with self._lock:
            adapters = list(self._adapters.values())
        return [
            {
                "name": a.name,
                "kind": a.kind.value,
                "rank": a.rank,
                "alpha": a.alpha,
                "digest": a.digest[:16],
            }
            for a in sorted(adapters, key=lambda a: a.name)
        ]
