"""
Model configuration and deterministic parameter initialisation.

Every scalar comes from a single splitmix64 stream seeded by
``ModelConfig.seed``, mapped to ``U[-0.02, 0.02)`` and cast to float32. The
stream fills tensors in this fixed order:

1. token embeddings ``(vocab, d_model)``
2. position embeddings ``(max_positions, d_model)``
3. for each layer: ``wq, wk, wv, wo`` ``(d_model, d_model)``, ``w1``
   ``(ffn_dim, d_model)``, ``w2`` ``(d_model, ffn_dim)``, then the norms
   ``ln1_g, ln1_b, ln2_g, ln2_b`` ``(d_model,)``
4. condition projection ``(d_model, prompt_dim)``

Weight matrices are stored ``(d_out, d_in)``; a projection is ``x @ W.T``.
The output projection is tied to the token embeddings.
"""

import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Iterator, List, Tuple

import numpy as np

from ..errors import InvalidArgumentError
from ..services.cache_manager import CacheManager
from ..tokenspace import DEFAULT_CONDITION_LEN, VocabLayout

logger = logging.getLogger(__name__)

INIT_RANGE = 0.02

_GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX_1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX_2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1

LORA_TARGETS = ("q", "k", "v", "o")


class SplitMix64:
    """Vectorised splitmix64 generator.

    The n-th output (1-based) is ``mix(seed + n * gamma)``, which lets a block
    of outputs be computed at once while matching the sequential generator.
    """

    def __init__(self, seed: int):
        if not 0 <= seed <= _MASK64:
            raise InvalidArgumentError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = np.uint64(seed)
        self.drawn = 0

    def next_u64(self, count: int) -> np.ndarray:
        counter = np.arange(self.drawn + 1, self.drawn + count + 1, dtype=np.uint64)
        self.drawn += count
        with np.errstate(over="ignore"):
            z = self.seed + counter * _GOLDEN_GAMMA
            z = (z ^ (z >> np.uint64(30))) * _MIX_1
            z = (z ^ (z >> np.uint64(27))) * _MIX_2
        return z ^ (z >> np.uint64(31))

    def uniform(self, shape, low: float = -INIT_RANGE, high: float = INIT_RANGE) -> np.ndarray:
        count = int(np.prod(shape)) if len(shape) else 1
        unit = (self.next_u64(count) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return (low + (high - low) * unit).astype(np.float32).reshape(shape)


@dataclass(frozen=True)
class ModelConfig:
    vocab: VocabLayout
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    ffn_dim: int = 512
    max_positions: int = 2048
    condition_len: int = DEFAULT_CONDITION_LEN
    prompt_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "ffn_dim", "max_positions", "prompt_dim"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise InvalidArgumentError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.condition_len < 0:
            raise InvalidArgumentError(f"condition_len must be >= 0, got {self.condition_len}")
        if self.condition_len + 4 > self.max_positions:
            raise InvalidArgumentError(
                f"max_positions ({self.max_positions}) cannot hold the condition slots "
                f"plus a minimal prefix"
            )
        if not 0 <= self.seed <= _MASK64:
            raise InvalidArgumentError(f"seed must fit in 64 bits, got {self.seed}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kv_payload_shape(self) -> Tuple[int, int, int, int]:
        """Per-token KV payload: ``(n_layers, 2, n_heads, head_dim)``."""
        return (self.n_layers, 2, self.n_heads, self.head_dim)

    def target_shape(self, target: str) -> Tuple[int, int]:
        """``(d_out, d_in)`` of a LoRA target projection."""
        if target not in LORA_TARGETS:
            raise InvalidArgumentError(f"unknown LoRA target {target!r}")
        return (self.d_model, self.d_model)


@dataclass
class LayerParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray

    FIELD_ORDER = ("wq", "wk", "wv", "wo", "w1", "w2", "ln1_g", "ln1_b", "ln2_g", "ln2_b")

    def projection(self, target: str) -> np.ndarray:
        return getattr(self, f"w{target}")


@dataclass
class Parameters:
    config: ModelConfig
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    layers: List[LayerParams]
    cond_proj: np.ndarray
    merge_cache: CacheManager = field(
        default_factory=lambda: CacheManager(max_entries=32), repr=False, compare=False
    )

    def tensors(self) -> Iterator[Tuple[str, np.ndarray]]:
        """All tensors in fill order."""
        yield "tok_emb", self.tok_emb
        yield "pos_emb", self.pos_emb
        for i, layer in enumerate(self.layers):
            for name in LayerParams.FIELD_ORDER:
                yield f"layers.{i}.{name}", getattr(layer, name)
        yield "cond_proj", self.cond_proj

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in self.tensors():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
        return digest.hexdigest()

    def with_layers(self, layers: List[LayerParams]) -> "Parameters":
        """Copy sharing every tensor except the layers; gets its own merge cache."""
        return replace(self, layers=layers, merge_cache=CacheManager(max_entries=32))


def _layer_shapes(config: ModelConfig):
    d, f = config.d_model, config.ffn_dim
    return {
        "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "w1": (f, d), "w2": (d, f),
        "ln1_g": (d,), "ln1_b": (d,), "ln2_g": (d,), "ln2_b": (d,),
    }


def init_params(config: ModelConfig) -> Parameters:
    """Deterministically initialise all parameters from ``config.seed``."""
    rng = SplitMix64(config.seed)
    d = config.d_model
    tok_emb = rng.uniform((config.vocab.total_size, d))
    pos_emb = rng.uniform((config.max_positions, d))
    shapes = _layer_shapes(config)
    layers = []
    for _ in range(config.n_layers):
        tensors = {name: rng.uniform(shapes[name]) for name in LayerParams.FIELD_ORDER}
        layers.append(LayerParams(**tensors))
    cond_proj = rng.uniform((d, config.prompt_dim))
    params = Parameters(config, tok_emb, pos_emb, layers, cond_proj)
    logger.debug(f"Initialised {rng.drawn} parameters from seed {config.seed}")
    return params


def zero_params(config: ModelConfig) -> Parameters:
    """All-zero parameters: every logit is 0, so every distribution is uniform."""
    d = config.d_model
    shapes = _layer_shapes(config)
    layers = [
        LayerParams(**{name: np.zeros(shapes[name], np.float32) for name in LayerParams.FIELD_ORDER})
        for _ in range(config.n_layers)
    ]
    return Parameters(
        config,
        np.zeros((config.vocab.total_size, d), np.float32),
        np.zeros((config.max_positions, d), np.float32),
        layers,
        np.zeros((d, config.prompt_dim), np.float32),
    )
