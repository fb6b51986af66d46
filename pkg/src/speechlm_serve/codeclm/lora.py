"""
Stackable LoRA adapters and the TKLA adapter container.

An adapter holds, per layer and per attention projection (q, k, v, o), a
factor pair ``A (r x d_in)`` and ``B (d_out x r)``. Its weight delta is
``(alpha / r) * B @ A``; a rank-0 adapter is the identity.

TKLA container layout (all integers little-endian)::

    b"TKLA" | version u32 | metadata length u32 | metadata (UTF-8 JSON)
    | f32 tensor data in manifest order

The metadata carries ``name``, ``kind``, ``rank``, ``alpha`` and
``tensors``, a list of ``{"name": "layers.<i>.<target>.<A|B>", "shape": [..]}``.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import BadContainerError, InvalidArgumentError
from .params import LORA_TARGETS, LayerParams, ModelConfig, Parameters, SplitMix64

logger = logging.getLogger(__name__)

TKLA_MAGIC = b"TKLA"
TKLA_VERSION = 1
_HEADER = struct.Struct("<4sII")

FactorKey = Tuple[int, str]


class AdapterKind(str, Enum):
    """Adapter kinds, in application order"""
    DOMAIN = "domain"
    SPEAKER = "speaker"


KIND_ORDER = {AdapterKind.DOMAIN: 0, AdapterKind.SPEAKER: 1}


@dataclass(frozen=True)
class LoraAdapter:
    name: str
    kind: AdapterKind
    rank: int = 8
    alpha: float = 16.0
    factors: Mapping[FactorKey, Tuple[np.ndarray, np.ndarray]] = field(
        default_factory=dict, repr=False, compare=False
    )
    digest: str = field(default="", compare=True)

    def __post_init__(self):
        if not self.name:
            raise InvalidArgumentError("adapter name must not be empty")
        object.__setattr__(self, "kind", AdapterKind(self.kind))
        if self.rank < 0:
            raise InvalidArgumentError(f"adapter rank must be >= 0, got {self.rank}")
        for (layer, target), (a, b) in self.factors.items():
            if target not in LORA_TARGETS:
                raise InvalidArgumentError(f"unknown LoRA target {target!r}")
            if a.shape[0] != self.rank or b.shape[1] != self.rank:
                raise InvalidArgumentError(
                    f"factor shapes {a.shape}/{b.shape} disagree with rank {self.rank} "
                    f"at layers.{layer}.{target}"
                )
        if not self.digest:
            object.__setattr__(self, "digest", self._compute_digest())

    @property
    def is_identity(self) -> bool:
        return self.rank == 0 or not self.factors

    @property
    def scale(self) -> np.float32:
        return np.float32(self.alpha / self.rank) if self.rank else np.float32(0.0)

    def delta(self, layer: int, target: str) -> Optional[np.ndarray]:
        """``(alpha/r) * B @ A`` for one projection, or None when absent."""
        if self.rank == 0:
            return None
        pair = self.factors.get((layer, target))
        if pair is None:
            return None
        a, b = pair
        return (self.scale * (b @ a)).astype(np.float32)

    def manifest(self) -> List[Dict[str, object]]:
        entries = []
        for layer, target in sorted(self.factors):
            a, b = self.factors[(layer, target)]
            entries.append({"name": f"layers.{layer}.{target}.A", "shape": list(a.shape)})
            entries.append({"name": f"layers.{layer}.{target}.B", "shape": list(b.shape)})
        return entries

    def validate_against(self, config: ModelConfig) -> None:
        """Raise BadContainerError when factor shapes do not fit the model."""
        for (layer, target), (a, b) in self.factors.items():
            if not 0 <= layer < config.n_layers:
                raise BadContainerError(
                    f"adapter {self.name!r} targets layer {layer}, model has {config.n_layers}"
                )
            d_out, d_in = config.target_shape(target)
            if a.shape != (self.rank, d_in) or b.shape != (d_out, self.rank):
                raise BadContainerError(
                    f"adapter {self.name!r} layers.{layer}.{target}: shapes "
                    f"A{tuple(a.shape)} B{tuple(b.shape)} do not match model "
                    f"(expected A({self.rank}, {d_in}) B({d_out}, {self.rank}))"
                )

    def _compute_digest(self) -> str:
        digest = hashlib.sha256()
        digest.update(f"{self.name}|{self.kind.value}|{self.rank}|{self.alpha!r}".encode("utf-8"))
        for key in sorted(self.factors):
            a, b = self.factors[key]
            digest.update(f"{key[0]}.{key[1]}".encode("utf-8"))
            digest.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
            digest.update(np.ascontiguousarray(b, dtype="<f4").tobytes())
        return digest.hexdigest()


def random_adapter(config: ModelConfig, name: str, kind: Union[AdapterKind, str],
                   rank: int = 8, alpha: float = 16.0, seed: int = 0,
                   init_range: float = 0.02,
                   targets: Sequence[str] = LORA_TARGETS) -> LoraAdapter:
    """Deterministic adapter with factors drawn from a splitmix64 stream."""
    rng = SplitMix64(seed)
    factors = {}
    for layer in range(config.n_layers):
        for target in targets:
            d_out, d_in = config.target_shape(target)
            a = rng.uniform((rank, d_in), -init_range, init_range)
            b = rng.uniform((d_out, rank), -init_range, init_range)
            factors[(layer, target)] = (a, b)
    return LoraAdapter(name=name, kind=AdapterKind(kind), rank=rank, alpha=alpha, factors=factors)


def canonical_stack(adapters: Iterable[LoraAdapter]) -> List[LoraAdapter]:
    """Non-identity adapters in a fixed summation order.

    Sorting by (kind, name, digest) makes the merged weights independent of
    the order the caller listed the adapters in.
    """
    active = [a for a in adapters if not a.is_identity]
    return sorted(active, key=lambda a: (KIND_ORDER[a.kind], a.name, a.digest))


def stack_key(adapters: Iterable[LoraAdapter]) -> Tuple[str, ...]:
    return tuple(a.digest for a in canonical_stack(adapters))


def merged_layers(params: Parameters, adapters: Sequence[LoraAdapter]) -> List[LayerParams]:
    """Layers with every adapter delta folded in: ``W + sum(deltas)``.

    With no active adapter the base layers are returned unchanged. Results are
    cached per stack on ``params.merge_cache``.
    """
    stack = canonical_stack(adapters)
    if not stack:
        return params.layers
    key = tuple(a.digest for a in stack)
    cached = params.merge_cache.get(key)
    if cached is not None:
        return cached

    layers = []
    for index, layer in enumerate(params.layers):
        updates = {}
        for target in LORA_TARGETS:
            deltas = [d for d in (a.delta(index, target) for a in stack) if d is not None]
            if not deltas:
                continue
            total = deltas[0]
            for d in deltas[1:]:
                total = total + d
            updates[f"w{target}"] = layer.projection(target) + total
        layers.append(LayerParams(**{**layer.__dict__, **updates}))
    params.merge_cache.set(key, layers)
    logger.debug(f"Merged adapter stack {[a.name for a in stack]} into base weights")
    return layers


def merge_dense(params: Parameters, adapters: Sequence[LoraAdapter]) -> Parameters:
    """New parameters with the adapter stack folded into the dense weights."""
    return params.with_layers(merged_layers(params, adapters))


def encode_adapter(adapter: LoraAdapter) -> bytes:
    """Serialise an adapter to TKLA bytes."""
    manifest = adapter.manifest()
    metadata = json.dumps(
        {
            "name": adapter.name,
            "kind": adapter.kind.value,
            "rank": adapter.rank,
            "alpha": adapter.alpha,
            "tensors": manifest,
        },
        sort_keys=True,
    ).encode("utf-8")
    chunks = [_HEADER.pack(TKLA_MAGIC, TKLA_VERSION, len(metadata)), metadata]
    for layer, target in sorted(adapter.factors):
        a, b = adapter.factors[(layer, target)]
        chunks.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_adapter(blob: bytes, config: Optional[ModelConfig] = None) -> LoraAdapter:
    """Parse TKLA bytes; validate shapes against ``config`` when given.

    Raises:
        BadContainerError: on bad magic, version, metadata, length or shapes
    """
    if len(blob) < _HEADER.size:
        raise BadContainerError("container shorter than its header")
    magic, version, meta_len = _HEADER.unpack_from(blob, 0)
    if magic != TKLA_MAGIC:
        raise BadContainerError(f"bad magic {magic!r}, expected {TKLA_MAGIC!r}")
    if version != TKLA_VERSION:
        raise BadContainerError(f"unsupported container version {version}")
    meta_end = _HEADER.size + meta_len
    if meta_end > len(blob):
        raise BadContainerError("metadata length exceeds container size")
    try:
        meta = json.loads(blob[_HEADER.size:meta_end].decode("utf-8"))
        name = str(meta["name"])
        kind = AdapterKind(meta["kind"])
        rank = int(meta["rank"])
        alpha = float(meta["alpha"])
        tensors = [(str(t["name"]), tuple(int(x) for x in t["shape"])) for t in meta["tensors"]]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise BadContainerError(f"invalid metadata: {e}") from None

    offset = meta_end
    raw: Dict[str, np.ndarray] = {}
    for tensor_name, shape in tensors:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > len(blob):
            raise BadContainerError(f"tensor data truncated at {tensor_name}")
        raw[tensor_name] = np.frombuffer(blob, dtype="<f4", count=count, offset=offset) \
            .astype(np.float32).reshape(shape)
        offset += nbytes
    if offset != len(blob):
        raise BadContainerError(f"{len(blob) - offset} trailing bytes after tensor data")

    factors: Dict[FactorKey, Tuple[np.ndarray, np.ndarray]] = {}
    for tensor_name in raw:
        parts = tensor_name.split(".")
        if len(parts) != 4 or parts[0] != "layers" or parts[3] not in ("A", "B"):
            raise BadContainerError(f"unexpected tensor name {tensor_name!r}")
        if parts[3] != "A":
            continue
        key = (int(parts[1]), parts[2])
        b_name = f"layers.{parts[1]}.{parts[2]}.B"
        if b_name not in raw:
            raise BadContainerError(f"tensor {tensor_name} has no matching B factor")
        factors[key] = (raw[tensor_name], raw[b_name])

    try:
        adapter = LoraAdapter(name=name, kind=kind, rank=rank, alpha=alpha, factors=factors)
    except InvalidArgumentError as e:
        raise BadContainerError(e.message) from None
    if config is not None:
        adapter.validate_against(config)
    return adapter


def save_adapter(adapter: LoraAdapter, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_bytes(encode_adapter(adapter))
    logger.info(f"Wrote adapter {adapter.name!r} ({adapter.kind.value}, rank {adapter.rank}) to {path}")
    return path


def load_adapter(path: Union[str, Path], config: Optional[ModelConfig] = None) -> LoraAdapter:
    return decode_adapter(Path(path).read_bytes(), config)


def adapter_from_npz(path: Union[str, Path], name: str, kind: Union[AdapterKind, str],
                     alpha: float) -> LoraAdapter:
    """Build an adapter from an ``.npz`` holding ``layers.<i>.<target>.A/B`` arrays."""
    factors = {}
    with np.load(path) as archive:
        keys = set(archive.files)
        for key in keys:
            parts = key.split(".")
            if len(parts) != 4 or parts[3] != "A":
                continue
            b_key = f"layers.{parts[1]}.{parts[2]}.B"
            if b_key not in keys:
                raise BadContainerError(f"{path}: {key} has no matching B factor")
            factors[(int(parts[1]), parts[2])] = (
                archive[key].astype(np.float32),
                archive[b_key].astype(np.float32),
            )
    if not factors:
        raise BadContainerError(f"{path}: no LoRA factors found")
    rank = next(iter(factors.values()))[0].shape[0]
    return LoraAdapter(name=name, kind=AdapterKind(kind), rank=rank, alpha=alpha, factors=factors)
