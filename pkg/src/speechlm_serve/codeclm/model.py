"""
Decoder-only transformer forward pass.

Positions ``[0, condition_len)`` hold the projected condition embeddings;
token ``j`` sits at position ``condition_len + j``. Each block is pre-norm::

    x = x + attn(layer_norm(x))
    x = x + w2 @ gelu(w1 @ layer_norm(x))

and the logits are ``x @ tok_emb.T`` (tied output projection).

The pass processes one position at a time against a KV handle, resuming at
``cache.length``. Prefill and decode therefore run the exact same arithmetic,
which keeps paged and contiguous caches, batched and solo decoding, and
preempted and uninterrupted runs bit-identical.
"""

import logging
from typing import Optional, Sequence, Union

import numpy as np

from ..errors import CacheInconsistencyError, InvalidArgumentError, PositionOverflowError
from ..kvcache import KVHandle
from .lora import LoraAdapter, merged_layers
from .params import LayerParams, ModelConfig, Parameters
from .quant import QuantParams, as_float_params, dequant_matmul

logger = logging.getLogger(__name__)

LN_EPS = np.float32(1e-5)
_GELU_C = np.float32(np.sqrt(2.0 / np.pi))
_GELU_K = np.float32(0.044715)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mean = x.mean()
    centered = x - mean
    var = (centered * centered).mean()
    return centered / np.sqrt(var + LN_EPS) * gain + bias


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh approximation."""
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(_GELU_C * (x + _GELU_K * x * x * x)))


def project_conditions(params: Parameters, condition_embeddings: Optional[np.ndarray]) -> np.ndarray:
    """Project ``(condition_len, prompt_dim)`` embeddings into the model dimension."""
    config = params.config
    if config.condition_len == 0:
        return np.zeros((0, config.d_model), np.float32)
    if condition_embeddings is None:
        raise InvalidArgumentError("condition embeddings are required")
    cond = np.asarray(condition_embeddings, dtype=np.float32)
    expected = (config.condition_len, config.prompt_dim)
    if cond.shape != expected:
        raise InvalidArgumentError(f"condition embeddings shape {cond.shape} != {expected}")
    if not np.all(np.isfinite(cond)):
        raise InvalidArgumentError("condition embeddings contain non-finite values")
    return cond @ params.cond_proj.T


def _attend(config: ModelConfig, layer: LayerParams, past: np.ndarray, h: np.ndarray):
    """Single-position self-attention; returns (output, k, v)."""
    n_heads, head_dim = config.n_heads, config.head_dim
    q = (h @ layer.wq.T).reshape(n_heads, head_dim)
    k = (h @ layer.wk.T).reshape(n_heads, head_dim)
    v = (h @ layer.wv.T).reshape(n_heads, head_dim)

    keys = np.concatenate([past[:, 0], k[None]], axis=0)  # (t + 1, heads, head_dim)
    values = np.concatenate([past[:, 1], v[None]], axis=0)
    scores = np.einsum("hd,thd->ht", q, keys) * np.float32(1.0 / np.sqrt(head_dim))
    scores = scores - scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    weights = weights / weights.sum(axis=1, keepdims=True)
    out = np.einsum("ht,thd->hd", weights, values).reshape(config.d_model)
    return out @ layer.wo.T, k, v


def _input_vector(params: Parameters, cond: np.ndarray, token_ids: Sequence[int],
                  position: int) -> np.ndarray:
    condition_len = params.config.condition_len
    if position < condition_len:
        base = cond[position]
    else:
        base = params.tok_emb[token_ids[position - condition_len]]
    return (base + params.pos_emb[position]).astype(np.float32)


def forward(params: Union[Parameters, QuantParams],
            adapters: Sequence[LoraAdapter],
            condition_embeddings: Optional[np.ndarray],
            token_ids: Sequence[int],
            cache: KVHandle,
            logit_bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Run every position not yet in ``cache`` and return the last position's logits.

    Args:
        params: float or int8-quantized parameters
        adapters: LoRA adapters folded into the attention projections
        condition_embeddings: ``(condition_len, prompt_dim)`` prompt embedding
        token_ids: full token sequence so far (prefix plus generated tokens)
        cache: KV handle; its length says how many positions are already done
        logit_bias: optional additive bias over the vocabulary

    Returns:
        float32 logits of shape ``(vocab,)``

    Raises:
        PositionOverflowError: sequence longer than ``max_positions``
        CacheInconsistencyError: cache already holds every position
        OutOfPagesError: a paged cache ran out of pages; already-cached
            positions stay valid and a later call resumes from there
    """
    base = as_float_params(params)
    config = base.config
    vocab_size = config.vocab.total_size
    total = config.condition_len + len(token_ids)
    if total > config.max_positions:
        raise PositionOverflowError(
            f"sequence needs {total} positions, model holds {config.max_positions}",
            details={"positions": total, "max_positions": config.max_positions},
        )
    start = cache.length
    if start >= total:
        raise CacheInconsistencyError(
            f"cache holds {start} positions, nothing new in a {total}-position sequence"
        )
    for token_id in token_ids[max(0, start - config.condition_len):]:
        if not 0 <= token_id < vocab_size:
            raise InvalidArgumentError(f"token id {token_id} outside vocabulary [0, {vocab_size})")

    layers = merged_layers(base, adapters)
    cond = project_conditions(base, condition_embeddings)
    payload = np.empty(config.kv_payload_shape, dtype=np.float32)

    x = None
    for position in range(start, total):
        x = _input_vector(base, cond, token_ids, position)
        past = cache.view(position)  # (position, layers, 2, heads, head_dim)
        for index, layer in enumerate(layers):
            h = layer_norm(x, layer.ln1_g, layer.ln1_b)
            attn, k, v = _attend(config, layer, past[:, index], h)
            payload[index, 0] = k
            payload[index, 1] = v
            x = x + attn
            h = layer_norm(x, layer.ln2_g, layer.ln2_b)
            x = x + gelu(h @ layer.w1.T) @ layer.w2.T
        cache.append(payload.copy())

    if isinstance(params, QuantParams):
        logits = dequant_matmul(params.tok_emb, x)
    else:
        logits = x @ base.tok_emb.T
    if logit_bias is not None:
        bias = np.asarray(logit_bias, dtype=np.float32)
        if bias.shape != (vocab_size,):
            raise InvalidArgumentError(f"logit_bias shape {bias.shape} != ({vocab_size},)")
        logits = logits + bias
    return logits
