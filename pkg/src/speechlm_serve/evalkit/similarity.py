"""Speaker similarity between reference and generated audio."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Union

import numpy as np

from ..errors import InvalidArgumentError
from ..models.eval_models import SimilarityRecord
from ..toycodec import CodecSpec, PromptAudio, prompt_embed, read_wav, sim

logger = logging.getLogger(__name__)

Audio = Union[PromptAudio, np.ndarray]


@dataclass
class SimilarityReport:
    scores: Dict[str, float] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.scores.values())))

    @property
    def minimum(self) -> float:
        return float(min(self.scores.values()))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "utterances": len(self.scores),
            "mean": self.mean,
            "min": self.minimum,
            "scores": dict(sorted(self.scores.items())),
        }


def _embed(spec: CodecSpec, audio: Audio, condition_len: int, seed: int) -> np.ndarray:
    if isinstance(audio, PromptAudio) and audio.sample_rate != spec.sample_rate:
        raise InvalidArgumentError(
            f"audio sample rate {audio.sample_rate} does not match codec rate {spec.sample_rate}"
        )
    return prompt_embed(spec, audio, condition_len, seed)


def similarity_report(pairs: Iterable[Tuple[str, Audio, Audio]], spec: CodecSpec,
                      condition_len: int = 8, seed: int = 0) -> SimilarityReport:
    """SIM of each ``(utterance_id, reference, hypothesis)`` triple."""
    report = SimilarityReport()
    for utterance_id, reference, hypothesis in pairs:
        if utterance_id in report.scores:
            raise InvalidArgumentError(f"duplicate utterance id {utterance_id!r}")
        report.scores[utterance_id] = sim(
            _embed(spec, reference, condition_len, seed),
            _embed(spec, hypothesis, condition_len, seed),
        )
    if not report.scores:
        raise InvalidArgumentError("similarity needs at least one utterance")
    logger.info(f"SIM over {len(report.scores)} utterances: mean {report.mean:.4f}, min {report.minimum:.4f}")
    return report


def load_similarity_pairs(records: Iterable[SimilarityRecord],
                          base_dir: Optional[Union[str, Path]] = None):
    """Yield ``(utterance_id, reference, hypothesis)`` with WAV paths resolved against ``base_dir``."""
    base = Path(base_dir) if base_dir is not None else None
    for record in records:
        paths = [Path(record.reference_wav), Path(record.hypothesis_wav)]
        if base is not None:
            paths = [p if p.is_absolute() else base / p for p in paths]
        yield record.utterance_id, read_wav(paths[0]), read_wav(paths[1])
