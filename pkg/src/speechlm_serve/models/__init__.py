"""Record schemas and result types."""

from .eval_models import (
    EvalRecord,
    HumanRank,
    PerRecord,
    PreferencePair,
    RatedSample,
    RatingSource,
    SentenceRecord,
    SimilarityRecord,
    UtteranceRecord,
)
from .response_models import ErrorDetails

__all__ = [
    'ErrorDetails',
    'EvalRecord',
    'HumanRank',
    'PerRecord',
    'PreferencePair',
    'RatedSample',
    'RatingSource',
    'SentenceRecord',
    'SimilarityRecord',
    'UtteranceRecord',
]
