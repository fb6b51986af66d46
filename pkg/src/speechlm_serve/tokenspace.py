"""
Unified token vocabulary and conditional sequence construction.

Layout of the id space::

    0 PAD | 1 BP | 2 EP | 3 S | 4 E | phonemes | codec tokens

A training sequence is ``[BP, phones..., EP, S, codec..., E]`` preceded by
``condition_len`` continuous condition slots, which occupy positions
``[0, condition_len)`` of the model's positional indexing. Only codec
positions and the final E are predicted.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .errors import InvalidArgumentError

logger = logging.getLogger(__name__)

PAD = 0
BP = 1
EP = 2
S = 3
E = 4
NUM_SPECIAL = 5

SPECIAL_NAMES = {PAD: "PAD", BP: "BP", EP: "EP", S: "S", E: "E"}

DEFAULT_CONDITION_LEN = 8

# Keeps ids representable as signed 32-bit integers.
MAX_TOTAL_SIZE = 2**31 - 1


class TokenClass(str, Enum):
    """Classes of vocabulary ids"""
    SPECIAL = "special"
    PHONEME = "phoneme"
    CODEC = "codec"


@dataclass(frozen=True)
class VocabLayout:
    """Contiguous, disjoint id ranges for special, phoneme and codec tokens."""

    phoneme_count: int
    codec_count: int

    @property
    def phoneme_start(self) -> int:
        return NUM_SPECIAL

    @property
    def codec_start(self) -> int:
        return NUM_SPECIAL + self.phoneme_count

    @property
    def total_size(self) -> int:
        return NUM_SPECIAL + self.phoneme_count + self.codec_count

    def is_phoneme(self, token_id: int) -> bool:
        return self.phoneme_start <= token_id < self.codec_start

    def is_codec(self, token_id: int) -> bool:
        return self.codec_start <= token_id < self.total_size

    def classify(self, token_id: int) -> TokenClass:
        if 0 <= token_id < NUM_SPECIAL:
            return TokenClass.SPECIAL
        if self.is_phoneme(token_id):
            return TokenClass.PHONEME
        if self.is_codec(token_id):
            return TokenClass.CODEC
        raise InvalidArgumentError(
            f"token id {token_id} outside vocabulary [0, {self.total_size})",
            details={"token_id": token_id},
        )

    def codec_index(self, token_id: int) -> int:
        """Vocabulary id -> codec-token index used by the codec."""
        if not self.is_codec(token_id):
            raise InvalidArgumentError(f"token id {token_id} is not a codec token")
        return token_id - self.codec_start

    def codec_id(self, index: int) -> int:
        """Codec-token index -> vocabulary id."""
        if not 0 <= index < self.codec_count:
            raise InvalidArgumentError(
                f"codec index {index} outside [0, {self.codec_count})"
            )
        return self.codec_start + index

    def phoneme_id(self, index: int) -> int:
        if not 0 <= index < self.phoneme_count:
            raise InvalidArgumentError(
                f"phoneme index {index} outside [0, {self.phoneme_count})"
            )
        return self.phoneme_start + index


def build_vocab(phoneme_count: int, codec_count: int) -> VocabLayout:
    """Build the unified vocabulary layout.

    Raises:
        InvalidArgumentError: if a count is below 1 or the total overflows
    """
    for name, value in (("phoneme_count", phoneme_count), ("codec_count", codec_count)):
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise InvalidArgumentError(f"{name} must be a positive integer, got {value!r}")
    if NUM_SPECIAL + phoneme_count + codec_count > MAX_TOTAL_SIZE:
        raise InvalidArgumentError(
            f"vocabulary of {NUM_SPECIAL + phoneme_count + codec_count} ids overflows"
        )
    return VocabLayout(phoneme_count=phoneme_count, codec_count=codec_count)


@dataclass(frozen=True)
class PhonemeSeq:
    ids: Tuple[int, ...]

    @classmethod
    def of(cls, layout: VocabLayout, ids: Sequence[int]) -> "PhonemeSeq":
        ids = tuple(int(i) for i in ids)
        if not ids:
            raise InvalidArgumentError("phoneme sequence must not be empty")
        for token_id in ids:
            if not layout.is_phoneme(token_id):
                raise InvalidArgumentError(
                    f"id {token_id} is not in the phoneme range "
                    f"[{layout.phoneme_start}, {layout.codec_start})",
                    details={"token_id": token_id},
                )
        return cls(ids)

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class CodecSeq:
    ids: Tuple[int, ...] = ()

    @classmethod
    def of(cls, layout: VocabLayout, ids: Sequence[int]) -> "CodecSeq":
        ids = tuple(int(i) for i in ids)
        for token_id in ids:
            if not layout.is_codec(token_id):
                raise InvalidArgumentError(
                    f"id {token_id} is not in the codec range "
                    f"[{layout.codec_start}, {layout.total_size})",
                    details={"token_id": token_id},
                )
        return cls(ids)

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class ComposedSequence:
    """Condition-prefixed token sequence.

    ``boundaries`` maps ``"BP"``, ``"EP"``, ``"S"`` and (when present)
    ``"E"`` to their indices within ``token_ids``.
    """

    condition_len: int
    token_ids: Tuple[int, ...]
    boundaries: Dict[str, int] = field(default_factory=dict, compare=False, hash=False)

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def total_positions(self) -> int:
        return self.condition_len + len(self.token_ids)

    @property
    def has_end(self) -> bool:
        return "E" in self.boundaries

    def position_of(self, index: int) -> int:
        """Model position of ``token_ids[index]``."""
        return self.condition_len + index

    def extended(self, generated: Sequence[int]) -> Tuple[int, ...]:
        return self.token_ids + tuple(generated)


def _check_condition_len(condition_len: int) -> None:
    if condition_len < 0:
        raise InvalidArgumentError(f"condition_len must be >= 0, got {condition_len}")


def _layout(condition_len: int, token_ids: Tuple[int, ...], n_phones: int,
            with_end: bool) -> ComposedSequence:
    boundaries = {"BP": 0, "EP": n_phones + 1, "S": n_phones + 2}
    if with_end:
        boundaries["E"] = len(token_ids) - 1
    return ComposedSequence(condition_len, token_ids, boundaries)


def compose_training_sequence(condition_len: int, phones: PhonemeSeq,
                              codec: CodecSeq) -> ComposedSequence:
    """Build ``[BP, phones..., EP, S, codec..., E]``."""
    _check_condition_len(condition_len)
    if not phones.ids:
        raise InvalidArgumentError("phoneme sequence must not be empty")
    token_ids = (BP, *phones.ids, EP, S, *codec.ids, E)
    return _layout(condition_len, token_ids, len(phones.ids), with_end=True)


def compose_inference_prefix(condition_len: int, phones: PhonemeSeq) -> ComposedSequence:
    """Build ``[BP, phones..., EP, S]``; decoding appends codec tokens after S."""
    _check_condition_len(condition_len)
    if not phones.ids:
        raise InvalidArgumentError("phoneme sequence must not be empty")
    token_ids = (BP, *phones.ids, EP, S)
    return _layout(condition_len, token_ids, len(phones.ids), with_end=False)


def prediction_mask(seq: ComposedSequence) -> List[bool]:
    """True exactly at the positions after S (codec tokens and E)."""
    try:
        s_index = seq.token_ids.index(S)
    except ValueError:
        raise InvalidArgumentError("sequence has no start identifier S") from None
    return [i > s_index for i in range(len(seq.token_ids))]


def parse_training_sequence(seq: ComposedSequence,
                            layout: VocabLayout) -> Tuple[PhonemeSeq, CodecSeq]:
    """Recover ``(phones, codec)`` from a composed training sequence."""
    ids = seq.token_ids
    if len(ids) < 5 or ids[0] != BP or ids[-1] != E:
        raise InvalidArgumentError("not a training-layout sequence")
    try:
        ep_index = ids.index(EP)
    except ValueError:
        raise InvalidArgumentError("sequence has no EP") from None
    if ep_index + 1 >= len(ids) or ids[ep_index + 1] != S:
        raise InvalidArgumentError("S must immediately follow EP")
    phones = PhonemeSeq.of(layout, ids[1:ep_index])
    codec = CodecSeq.of(layout, ids[ep_index + 2:-1])
    return phones, codec


def parse_phones_line(text: str, layout: VocabLayout) -> PhonemeSeq:
    """Parse whitespace-separated phoneme ids."""
    try:
        ids = [int(tok) for tok in text.split()]
    except ValueError as e:
        raise InvalidArgumentError(f"phones must be integers: {e}") from None
    return PhonemeSeq.of(layout, ids)


def read_phones_file(path: Union[str, Path], layout: VocabLayout) -> List[PhonemeSeq]:
    """Read a ``.phones`` file: one utterance per line; blank and ``#`` lines skipped."""
    path = Path(path)
    utterances = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        try:
            utterances.append(parse_phones_line(stripped, layout))
        except InvalidArgumentError as e:
            raise InvalidArgumentError(f"{path}:{line_no}: {e.message}") from None
    if not utterances:
        raise InvalidArgumentError(f"{path}: no utterances found")
    logger.debug(f"Read {len(utterances)} utterances from {path}")
    return utterances


def describe(token_id: int, layout: Optional[VocabLayout] = None) -> str:
    """Human-readable name of an id, for logs."""
    if token_id in SPECIAL_NAMES:
        return SPECIAL_NAMES[token_id]
    if layout is None:
        return str(token_id)
    if layout.is_phoneme(token_id):
        return f"p{token_id - layout.phoneme_start}"
    if layout.is_codec(token_id):
        return f"c{token_id - layout.codec_start}"
    return f"?{token_id}"
