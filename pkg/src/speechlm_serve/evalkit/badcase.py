"""Machine-checkable bad-case detectors and the bad case rate."""

from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Sequence

import numpy as np

from ..errors import InvalidArgumentError

BCR_UTTERANCES = 100


@dataclass(frozen=True)
class BadCaseConfig:
    frames_per_phone: int = 4
    length_tolerance: float = 0.3
    repeat_ngram: int = 4
    repeat_count: int = 4

    def __post_init__(self):
        if self.frames_per_phone < 1:
            raise InvalidArgumentError(f"frames_per_phone must be >= 1, got {self.frames_per_phone}")
        if self.length_tolerance < 0:
            raise InvalidArgumentError(f"length_tolerance must be >= 0, got {self.length_tolerance}")
        if self.repeat_ngram < 1 or self.repeat_count < 2:
            raise InvalidArgumentError(
                f"repetition needs ngram >= 1 and count >= 2, got {self.repeat_ngram}/{self.repeat_count}"
            )

    @classmethod
    def from_settings(cls, settings) -> "BadCaseConfig":
        return cls(
            frames_per_phone=settings.frames_per_phone,
            length_tolerance=settings.length_tolerance,
            repeat_ngram=settings.repeat_ngram,
            repeat_count=settings.repeat_count,
        )


@dataclass(frozen=True)
class BadCaseFlags:
    length_anomaly: bool = False
    repetition_loop: bool = False
    no_termination: bool = False

    @property
    def is_bad(self) -> bool:
        return self.length_anomaly or self.repetition_loop or self.no_termination

    def to_dict(self) -> Dict[str, bool]:
        return {
            "length_anomaly": self.length_anomaly,
            "repetition_loop": self.repetition_loop,
            "no_termination": self.no_termination,
        }


def has_repetition_loop(tokens: Sequence[int], ngram: int = 4, count: int = 4) -> bool:
    """True when some ``ngram`` occurs ``count`` times back to back."""
    arr = np.asarray(tokens, dtype=np.int64)
    span = ngram * count
    if arr.size < span:
        return False
    # tokens[i:i+span] repeats an n-gram iff it has period ngram,
    # i.e. a run of span - ngram equal shifted pairs.
    same = np.concatenate(([False], arr[ngram:] == arr[:-ngram], [False]))
    edges = np.flatnonzero(np.diff(same.astype(np.int8)))
    runs = edges[1::2] - edges[::2]
    return bool(runs.size) and int(runs.max()) >= span - ngram


def detect_bad_cases(tokens: Sequence[int], terminated: bool, expected_phone_count: int,
                     config: BadCaseConfig = BadCaseConfig()) -> BadCaseFlags:
    expected = expected_phone_count * config.frames_per_phone
    return BadCaseFlags(
        length_anomaly=abs(len(tokens) - expected) > config.length_tolerance * expected,
        repetition_loop=has_repetition_loop(tokens, config.repeat_ngram, config.repeat_count),
        no_termination=not terminated,
    )


@dataclass
class BadCaseReport:
    flags: Dict[str, BadCaseFlags] = field(default_factory=dict)

    def add(self, utterance_id: str, flags: BadCaseFlags) -> None:
        if utterance_id in self.flags:
            raise InvalidArgumentError(f"duplicate utterance id {utterance_id!r}")
        self.flags[utterance_id] = flags

    @property
    def utterances(self) -> int:
        return len(self.flags)

    @property
    def bad_count(self) -> int:
        return sum(1 for f in self.flags.values() if f.is_bad)

    def category_counts(self) -> Dict[str, int]:
        counts = {"length_anomaly": 0, "repetition_loop": 0, "no_termination": 0}
        for f in self.flags.values():
            for name, flagged in f.to_dict().items():
                counts[name] += flagged
        return counts

    def bad_ids(self) -> List[str]:
        return sorted(uid for uid, f in self.flags.items() if f.is_bad)

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "utterances": self.utterances,
            "bad_cases": self.bad_count,
            "bad_rate": bad_rate(self) if self.utterances else None,
            "categories": self.category_counts(),
            "flagged": {uid: self.flags[uid].to_dict() for uid in self.bad_ids()},
        }
        if self.utterances == BCR_UTTERANCES:
            data["bcr"] = bcr(self)
        return data


def build_report(records: Iterable, config: BadCaseConfig = BadCaseConfig()) -> BadCaseReport:
    """Report over ``UtteranceRecord``-like objects."""
    report = BadCaseReport()
    for record in records:
        report.add(record.utterance_id,
                   detect_bad_cases(record.tokens, record.terminated, record.phone_count, config))
    return report


def bcr(report: BadCaseReport) -> float:
    """Bad cases per 100 utterances, over exactly 100 utterances.

    Raises:
        InvalidArgumentError: the report does not hold exactly 100 utterances
    """
    if report.utterances != BCR_UTTERANCES:
        raise InvalidArgumentError(
            f"bcr needs exactly {BCR_UTTERANCES} utterances, got {report.utterances}; "
            f"use bad_rate for other counts"
        )
    return report.bad_count / BCR_UTTERANCES


def bad_rate(report: BadCaseReport) -> float:
    if not report.utterances:
        raise InvalidArgumentError("bad_rate needs at least one utterance")
    return report.bad_count / report.utterances
