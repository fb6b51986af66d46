"""
Repeated-sampling rating pipeline.

For each sentence the model decodes one greedy reference and ``samples``
sampled candidates (seed ``base_seed + sample_index``). Every candidate is
rendered to PCM and recovered through the codec, rated by PER against the
greedy reference, and scored by its mean log-probability under the base model
as the quality proxy. The output feeds ``build_preference_pairs``.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np

from ..codeclm import DecodeParams, LoraAdapter, decode, sequence_logprob
from ..codeclm.decode import ModelParams
from ..errors import InvalidArgumentError
from ..models.eval_models import RatedSample, SentenceRecord
from ..tokenspace import (
    CodecSeq,
    PhonemeSeq,
    compose_inference_prefix,
    compose_training_sequence,
)
from ..toycodec import CodecSpec, pcm_to_tokens, tokens_to_pcm
from .per import per

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplingPlan:
    samples: int = 5
    base_seed: int = 0
    temperature: float = 1.0
    top_k: int = 50
    max_new_tokens: int = 256

    def __post_init__(self):
        if self.samples < 2:
            raise InvalidArgumentError(f"samples must be >= 2, got {self.samples}")
        if self.base_seed < 0:
            raise InvalidArgumentError(f"base_seed must be >= 0, got {self.base_seed}")

    def sample_params(self, sample_index: int) -> DecodeParams:
        return DecodeParams.sampled(self.base_seed + sample_index, temperature=self.temperature,
                                    top_k=self.top_k, max_new_tokens=self.max_new_tokens)


def codec_round_trip(spec: CodecSpec, layout, codec_ids: Sequence[int]) -> List[int]:
    """Vocabulary ids recovered from the rendered audio of ``codec_ids``."""
    indices = [layout.codec_index(t) for t in codec_ids]
    recovered = pcm_to_tokens(spec, tokens_to_pcm(spec, indices))
    return [layout.codec_id(int(t)) for t in recovered]


def rate_sentence(params: ModelParams, sentence: SentenceRecord, condition: Optional[np.ndarray],
                  spec: CodecSpec, plan: SamplingPlan = SamplingPlan(),
                  adapters: Sequence[LoraAdapter] = ()) -> List[RatedSample]:
    """Rated samples for one sentence; empty when the greedy reference is empty."""
    config = params.config
    layout = config.vocab
    phones = PhonemeSeq.of(layout, sentence.phones)
    prefix = compose_inference_prefix(config.condition_len, phones)

    reference = decode(params, adapters, prefix, condition,
                       DecodeParams.greedy(plan.max_new_tokens)).codec_ids
    if not reference:
        logger.warning(f"Sentence {sentence.sentence_id}: greedy reference is empty, skipping")
        return []

    rated = []
    for index in range(plan.samples):
        result = decode(params, adapters, prefix, condition, plan.sample_params(index))
        recovered = codec_round_trip(spec, layout, result.codec_ids)
        scored = compose_training_sequence(config.condition_len, phones,
                                           CodecSeq.of(layout, result.codec_ids))
        rated.append(RatedSample(
            sentence_id=sentence.sentence_id,
            sample_index=index,
            tokens=list(result.codec_ids),
            per_rate=per(reference, recovered).rate,
            quality_proxy=sequence_logprob(params, scored, condition),
            terminated=result.terminated,
        ))
    logger.debug(f"Sentence {sentence.sentence_id}: rated {len(rated)} samples")
    return rated


def sample_and_rate(params: ModelParams, sentences: Iterable[SentenceRecord],
                    condition: Optional[np.ndarray], spec: CodecSpec,
                    plan: SamplingPlan = SamplingPlan(),
                    adapters: Sequence[LoraAdapter] = ()) -> List[RatedSample]:
    """Rate every sentence; sentences with an empty greedy reference are skipped.

    Adapters shape the decodes only; the quality proxy is always scored under
    the base model.
    """
    rated: List[RatedSample] = []
    count = 0
    for sentence in sentences:
        rated.extend(rate_sentence(params, sentence, condition, spec, plan, adapters))
        count += 1
    logger.info(f"Rated {len(rated)} samples over {count} sentences")
    return rated
