"""
Record schemas for evaluation inputs and outputs.

Input files are JSON lines (one record per line) or CSV for human ranks;
every record is validated through these models so that schema violations
can be reported with their line number.
"""

from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class RatingSource(str, Enum):
    """Where the ratings behind a preference pair came from"""
    OBJECTIVE = "objective"
    SUBJECTIVE = "subjective"


class EvalRecord(BaseModel):
    """Base model for evaluation records"""

    model_config = ConfigDict(extra="forbid")


class PerRecord(EvalRecord):
    """Reference and hypothesis codec-token sequences of one utterance"""

    utterance_id: str = Field(..., min_length=1)
    reference: List[int] = Field(..., min_length=1, description="Engine token log")
    hypothesis: List[int] = Field(..., description="Tokens recovered from audio")


class UtteranceRecord(EvalRecord):
    """One generated utterance, as checked by the bad-case detectors"""

    utterance_id: str = Field(..., min_length=1)
    phone_count: int = Field(..., ge=1, description="Phonemes in the input text")
    tokens: List[int] = Field(default_factory=list, description="Generated codec tokens")
    terminated: bool = Field(..., description="Decoding stopped at E")


class RatedSample(EvalRecord):
    """One of N repeated samples for a sentence, with its ratings"""

    sentence_id: str = Field(..., min_length=1)
    sample_index: int = Field(..., ge=0)
    tokens: List[int] = Field(default_factory=list)
    per_rate: Optional[float] = Field(None, ge=0.0, description="PER against the greedy reference")
    quality_proxy: Optional[float] = Field(None, description="Mean log-probability under the base model")
    human_rank: Optional[int] = Field(None, ge=1, description="1 is best")
    terminated: Optional[bool] = None

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "sentence_id": "s001",
                "sample_index": 2,
                "tokens": [17, 940, 940, 3],
                "per_rate": 0.25,
                "quality_proxy": -6.91,
            }
        }
    )


class HumanRank(EvalRecord):
    """A row of the human ranking CSV"""

    sentence_id: str = Field(..., min_length=1)
    sample_index: int = Field(..., ge=0)
    rank: int = Field(..., ge=1)


class PreferencePair(EvalRecord):
    """Chosen and rejected sample indices for one sentence"""

    sentence_id: str = Field(..., min_length=1)
    chosen: int = Field(..., ge=0)
    rejected: int = Field(..., ge=0)
    source: RatingSource

    @field_validator("source", mode="before")
    @classmethod
    def validate_source(cls, v):
        if isinstance(v, str):
            return RatingSource(v.lower().strip())
        return v

    @model_validator(mode="after")
    def distinct_samples(self):
        if self.chosen == self.rejected:
            raise ValueError("chosen and rejected must be different samples")
        return self

    @property
    def key(self):
        return (self.chosen, self.rejected)


class SimilarityRecord(EvalRecord):
    """Reference and generated audio files to compare"""

    utterance_id: str = Field(..., min_length=1)
    reference_wav: str = Field(..., min_length=1)
    hypothesis_wav: str = Field(..., min_length=1)


class SentenceRecord(EvalRecord):
    """Input sentence for the sampling pipeline"""

    sentence_id: str = Field(..., min_length=1)
    phones: List[int] = Field(..., min_length=1)
