"""
Preference pairs from repeated sampling, and agreement between rating sources.

Objective ratings pick the sample with the lowest PER as chosen, breaking ties
by the higher quality proxy and then the lower sample index; the rejected
sample is the mirror image (highest PER, lower quality proxy, lower index).
Subjective ratings pick the best and the worst human rank, ties again going
to the lower index. A sentence whose best and worst samples are equal on every
rating yields no pair.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from ..errors import InvalidArgumentError
from ..models.eval_models import PreferencePair, RatedSample, RatingSource

logger = logging.getLogger(__name__)

MIN_SAMPLES = 2


def group_samples(samples: Iterable[RatedSample]) -> Dict[str, List[RatedSample]]:
    """Samples by sentence id, sorted by sentence id and sample index."""
    groups: Dict[str, List[RatedSample]] = defaultdict(list)
    for sample in samples:
        groups[sample.sentence_id].append(sample)
    result = {}
    for sentence_id in sorted(groups):
        group = sorted(groups[sentence_id], key=lambda s: s.sample_index)
        indices = [s.sample_index for s in group]
        if len(set(indices)) != len(indices):
            raise InvalidArgumentError(
                f"sentence {sentence_id!r} has duplicate sample indices",
                details={"sentence_id": sentence_id, "sample_indices": indices},
            )
        result[sentence_id] = group
    return result


def _check_ratings(sentence_id: str, group: Sequence[RatedSample], source: RatingSource) -> None:
    if len(group) < MIN_SAMPLES:
        raise InvalidArgumentError(
            f"sentence {sentence_id!r} has {len(group)} sample(s); pairs need at least {MIN_SAMPLES}"
        )
    if source == RatingSource.OBJECTIVE:
        missing = [s.sample_index for s in group if s.per_rate is None or s.quality_proxy is None]
        what = "per_rate and quality_proxy"
    else:
        missing = [s.sample_index for s in group if s.human_rank is None]
        what = "human_rank"
    if missing:
        raise InvalidArgumentError(
            f"sentence {sentence_id!r} samples {missing} are missing {what}",
            details={"sentence_id": sentence_id, "source": source.value},
        )


def _ratings(sample: RatedSample, source: RatingSource) -> Tuple[float, ...]:
    """Lower is better."""
    if source == RatingSource.OBJECTIVE:
        return (sample.per_rate, -sample.quality_proxy)
    return (float(sample.human_rank),)


def select_pair(sentence_id: str, group: Sequence[RatedSample],
                source: RatingSource) -> Optional[PreferencePair]:
    _check_ratings(sentence_id, group, source)
    best = min(group, key=lambda s: (*_ratings(s, source), s.sample_index))
    worst = min(group, key=lambda s: (*(-r for r in _ratings(s, source)), s.sample_index))
    if _ratings(best, source) == _ratings(worst, source):
        return None
    return PreferencePair(sentence_id=sentence_id, chosen=best.sample_index,
                          rejected=worst.sample_index, source=source)


def build_preference_pairs(samples: Iterable[RatedSample],
                           source: RatingSource = RatingSource.OBJECTIVE) -> List[PreferencePair]:
    """One pair per sentence, in sentence-id order.

    Raises:
        InvalidArgumentError: fewer than two samples for a sentence, duplicate
            sample indices, or ratings missing for ``source``
    """
    source = RatingSource(source)
    pairs = []
    skipped = 0
    for sentence_id, group in group_samples(samples).items():
        pair = select_pair(sentence_id, group, source)
        if pair is None:
            skipped += 1
            continue
        pairs.append(pair)
    logger.info(f"Built {len(pairs)} {source.value} preference pairs ({skipped} sentences tied)")
    return pairs


@dataclass(frozen=True)
class OverlapReport:
    sentences: int
    agreeing: int
    only_a: int
    only_b: int

    @property
    def fraction(self) -> float:
        return self.agreeing / self.sentences

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sentences": self.sentences,
            "agreeing": self.agreeing,
            "only_a": self.only_a,
            "only_b": self.only_b,
            "overlap": self.fraction,
        }


def _by_sentence(pairs: Iterable[PreferencePair], label: str) -> Dict[str, Tuple[int, int]]:
    keyed: Dict[str, Tuple[int, int]] = {}
    for pair in pairs:
        if pair.sentence_id in keyed:
            raise InvalidArgumentError(f"pair set {label} has two pairs for sentence {pair.sentence_id!r}")
        keyed[pair.sentence_id] = pair.key
    return keyed


def overlap_report(pairs_a: Iterable[PreferencePair], pairs_b: Iterable[PreferencePair],
                   universe: Optional[Iterable[str]] = None) -> OverlapReport:
    """Agreement between two pair sets.

    The denominator is ``universe`` when given, otherwise every sentence that
    has a pair in either set. A sentence counts as agreeing only when both
    sets hold a pair for it with the same chosen and rejected indices.

    Raises:
        InvalidArgumentError: empty universe, or a pair outside ``universe``
    """
    a = _by_sentence(pairs_a, "a")
    b = _by_sentence(pairs_b, "b")
    if universe is None:
        sentences = set(a) | set(b)
    else:
        sentences = set(universe)
        stray = (set(a) | set(b)) - sentences
        if stray:
            raise InvalidArgumentError(
                f"{len(stray)} paired sentence(s) are outside the universe",
                details={"sentence_ids": sorted(stray)[:10]},
            )
    if not sentences:
        raise InvalidArgumentError("overlap needs a non-empty sentence universe")
    return OverlapReport(
        sentences=len(sentences),
        agreeing=sum(1 for s in sentences if s in a and s in b and a[s] == b[s]),
        only_a=sum(1 for s in sentences if s in a and s not in b),
        only_b=sum(1 for s in sentences if s in b and s not in a),
    )


def overlap(pairs_a: Iterable[PreferencePair], pairs_b: Iterable[PreferencePair],
            universe: Optional[Iterable[str]] = None) -> float:
    return overlap_report(pairs_a, pairs_b, universe).fraction
