"""
Token error rate over codec-token sequences.

Levenshtein alignment with unit costs. The cost matrix is filled one row at a
time with numpy; the left-to-right insertion recurrence within a row is a
running minimum of ``cost - column`` shifted back by the column index.
"""

from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Sequence, Tuple

import numpy as np

from ..errors import InvalidArgumentError


@dataclass(frozen=True)
class PerReport:
    substitutions: int
    insertions: int
    deletions: int
    reference_length: int

    @property
    def edits(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        return self.edits / self.reference_length

    def to_dict(self) -> Dict[str, Any]:
        return {
            "substitutions": self.substitutions,
            "insertions": self.insertions,
            "deletions": self.deletions,
            "reference_length": self.reference_length,
            "edits": self.edits,
            "rate": self.rate,
        }


def edit_matrix(reference: Sequence[int], hypothesis: Sequence[int]) -> np.ndarray:
    """``(len(ref)+1, len(hyp)+1)`` matrix of prefix edit distances."""
    ref = np.asarray(reference, dtype=np.int64)
    hyp = np.asarray(hypothesis, dtype=np.int64)
    n, m = ref.size, hyp.size
    columns = np.arange(m + 1, dtype=np.int64)
    costs = np.zeros((n + 1, m + 1), dtype=np.int64)
    costs[0] = columns
    for i in range(1, n + 1):
        prev = costs[i - 1]
        row = np.empty(m + 1, dtype=np.int64)
        row[0] = i
        if m:
            substitution = prev[:-1] + (hyp != ref[i - 1])
            deletion = prev[1:] + 1
            row[1:] = np.minimum(substitution, deletion)
        # insertion: row[j] = min(row[j], row[j-1] + 1)
        costs[i] = np.minimum.accumulate(row - columns) + columns
    return costs


def align(reference: Sequence[int], hypothesis: Sequence[int]) -> Tuple[int, int, int]:
    """``(substitutions, insertions, deletions)`` of one optimal alignment.

    Backtrace from the end; at each cell a diagonal move (match or
    substitution) wins over an insertion, which wins over a deletion.
    """
    costs = edit_matrix(reference, hypothesis)
    i, j = len(reference), len(hypothesis)
    subs = ins = dels = 0
    while i > 0 or j > 0:
        here = costs[i, j]
        if i > 0 and j > 0:
            mismatch = int(reference[i - 1] != hypothesis[j - 1])
            if here == costs[i - 1, j - 1] + mismatch:
                subs += mismatch
                i -= 1
                j -= 1
                continue
        if j > 0 and here == costs[i, j - 1] + 1:
            ins += 1
            j -= 1
            continue
        dels += 1
        i -= 1
    return subs, ins, dels


def per(reference: Sequence[int], hypothesis: Sequence[int]) -> PerReport:
    """Edit rate of ``hypothesis`` against ``reference``.

    Raises:
        InvalidArgumentError: empty reference
    """
    reference = [int(t) for t in reference]
    hypothesis = [int(t) for t in hypothesis]
    if not reference:
        raise InvalidArgumentError("PER needs a non-empty reference")
    subs, ins, dels = align(reference, hypothesis)
    return PerReport(subs, ins, dels, len(reference))


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    return int(edit_matrix(a, b)[-1, -1])


@dataclass(frozen=True)
class CorpusPer:
    utterances: int
    edits: int
    reference_length: int
    mean_rate: float

    @property
    def rate(self) -> float:
        """Total edits over total reference length."""
        return self.edits / self.reference_length if self.reference_length else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "utterances": self.utterances,
            "edits": self.edits,
            "reference_length": self.reference_length,
            "corpus_rate": self.rate,
            "mean_rate": self.mean_rate,
        }


def corpus_per(reports: Iterable[PerReport]) -> CorpusPer:
    reports: List[PerReport] = list(reports)
    if not reports:
        raise InvalidArgumentError("corpus PER needs at least one utterance")
    return CorpusPer(
        utterances=len(reports),
        edits=sum(r.edits for r in reports),
        reference_length=sum(r.reference_length for r in reports),
        mean_rate=float(np.mean([r.rate for r in reports])),
    )
