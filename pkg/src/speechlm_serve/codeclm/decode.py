"""
Autoregressive decoding and sequence scoring.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import InvalidArgumentError
from ..kvcache import ContiguousKVCache, KVHandle
from ..tokenspace import BP, E, EP, S, CodecSeq, ComposedSequence, describe, prediction_mask
from .lora import LoraAdapter
from .model import forward
from .params import Parameters
from .quant import QuantParams
from .sampling import DecodeParams, candidate_ids, select_token

logger = logging.getLogger(__name__)

ModelParams = Union[Parameters, QuantParams]


@dataclass(frozen=True)
class DecodeResult:
    codec: CodecSeq
    terminated: bool
    generated: Tuple[int, ...] = ()
    stray_ids: Tuple[int, ...] = field(default=())

    @property
    def codec_ids(self) -> Tuple[int, ...]:
        return self.codec.ids


def new_cache(params: ModelParams, capacity: int = 64) -> ContiguousKVCache:
    config = params.config
    return ContiguousKVCache(config.kv_payload_shape, capacity=capacity,
                             max_positions=config.max_positions)


def check_prefix(prefix: ComposedSequence, condition_len: int) -> None:
    ids = prefix.token_ids
    if not ids or ids[-1] != S or E in ids:
        raise InvalidArgumentError("decode prefix must end at the start identifier S")
    if prefix.condition_len != condition_len:
        raise InvalidArgumentError(
            f"prefix condition_len {prefix.condition_len} != model condition_len {condition_len}"
        )


def generate_next(params: ModelParams, adapters: Sequence[LoraAdapter],
                  condition_embeddings: Optional[np.ndarray], token_ids: Sequence[int],
                  decode_params: DecodeParams, step: int, cache: KVHandle,
                  logit_bias: Optional[np.ndarray] = None) -> int:
    """Feed every uncached position and pick the token for generation step ``step``."""
    logits = forward(params, adapters, condition_embeddings, token_ids, cache, logit_bias)
    allowed = candidate_ids(params.config.vocab, decode_params.codec_only)
    return select_token(logits, decode_params, step, allowed)


def decode(params: ModelParams, adapters: Sequence[LoraAdapter], prefix: ComposedSequence,
           condition_embeddings: Optional[np.ndarray], decode_params: DecodeParams,
           cache: Optional[KVHandle] = None,
           logit_bias: Optional[np.ndarray] = None) -> DecodeResult:
    """Generate until E or ``max_new_tokens``.

    Non-codec ids other than E are kept in ``generated`` and listed in
    ``stray_ids``; they are bad-case signals, not errors. ``OutOfPagesError``
    from a paged cache propagates as the preemption signal.
    """
    check_prefix(prefix, params.config.condition_len)
    if cache is None:
        cache = new_cache(params)
    layout = params.config.vocab
    token_ids: List[int] = list(prefix.token_ids)
    generated: List[int] = []
    terminated = False

    for step in range(decode_params.max_new_tokens):
        token = generate_next(params, adapters, condition_embeddings, token_ids,
                              decode_params, step, cache, logit_bias)
        if token == E:
            terminated = True
            break
        generated.append(token)
        token_ids.append(token)

    codec = tuple(t for t in generated if layout.is_codec(t))
    strays = tuple(t for t in generated if not layout.is_codec(t))
    if strays:
        logger.debug(f"Decode produced non-codec ids {[describe(t, layout) for t in strays]}")
    return DecodeResult(CodecSeq(codec), terminated, tuple(generated), strays)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def sequence_logprob(params: ModelParams, seq: ComposedSequence,
                     condition_embeddings: Optional[np.ndarray],
                     adapters: Sequence[LoraAdapter] = ()) -> float:
    """Mean log-probability of the tokens at predicted positions."""
    mask = prediction_mask(seq)
    targets = [i for i, predicted in enumerate(mask) if predicted]
    if not targets:
        raise InvalidArgumentError("sequence has no predicted positions")
    cache = new_cache(params, capacity=seq.total_positions)
    ids = seq.token_ids
    total = 0.0
    for index in targets:
        # logits at the previous position predict token ``index``
        logits = forward(params, adapters, condition_embeddings, ids[:index], cache)
        total += float(log_softmax(logits)[ids[index]])
    return total / len(targets)


@dataclass(frozen=True)
class AgreementReport:
    contexts: int
    agreed: int

    @property
    def rate(self) -> float:
        return self.agreed / self.contexts if self.contexts else 0.0

    def to_dict(self):
        return {"contexts": self.contexts, "agreed": self.agreed, "rate": self.rate}


def greedy_agreement(params: Parameters, qparams: QuantParams, contexts: int = 200,
                     seed: int = 0, max_phones: int = 16, max_codec: int = 16) -> AgreementReport:
    """Fraction of random contexts where the float and int8 paths pick the same greedy token."""
    if contexts < 1:
        raise InvalidArgumentError(f"contexts must be >= 1, got {contexts}")
    config = params.config
    layout = config.vocab
    rng = np.random.default_rng(seed)
    allowed = candidate_ids(layout, codec_only=True)
    agreed = 0
    for _ in range(contexts):
        n_phones = int(rng.integers(1, max_phones + 1))
        n_codec = int(rng.integers(0, max_codec + 1))
        ids = [BP]
        ids += [int(i) for i in rng.integers(layout.phoneme_start, layout.codec_start, n_phones)]
        ids += [EP, S]
        ids += [int(i) for i in rng.integers(layout.codec_start, layout.total_size, n_codec)]
        cond = rng.standard_normal((config.condition_len, config.prompt_dim)).astype(np.float32)
        picks = []
        for p in (params, qparams):
            logits = forward(p, (), cond, ids, new_cache(p))
            picks.append(select_token(logits, DecodeParams(), 0, allowed))
        agreed += picks[0] == picks[1]
    report = AgreementReport(contexts, agreed)
    logger.info(f"Greedy agreement float vs int8: {report.agreed}/{report.contexts} ({report.rate:.3f})")
    return report
