"""
Parameter validation for external inputs.

Checks values arriving from control frames, CLI flags and input files before
they reach the engine, so failures name the offending field.
"""

import logging
from typing import Any, List, Optional, Sequence, Union

from .codeclm.sampling import MAX_NEW_TOKENS_LIMIT, DecodeMode, DecodeParams
from .errors import InvalidArgumentError
from .tokenspace import VocabLayout

logger = logging.getLogger(__name__)


class ValidationError(InvalidArgumentError):
    """Parameter validation failure tied to one field."""

    def __init__(self, field: str, message: str, value: Any = None):
        self.field = field
        self.value = value
        super().__init__(f"{field}: {message}", details={"field": field})


class ParameterValidator:
    """
    Centralized validation for synthesis and adapter parameters.

    Provides validation for:
    - Integer ranges (max_new_tokens, top_k, chunk sizes)
    - Phoneme id lists
    - Decode parameter sets
    - Adapter name lists
    """

    VALID_MODES = [m.value for m in DecodeMode]

    @staticmethod
    def validate_int_range(value: Any, min_val: int, max_val: Optional[int] = None,
                           field_name: str = "value") -> int:
        """
        Validate and convert an integer parameter.

        Args:
            value: int, integral float or numeric string
            min_val: Minimum allowed value
            max_val: Maximum allowed value, None for unbounded
            field_name: Name of the field for error messages

        Raises:
            ValidationError: If value is not an integer in range
        """
        if isinstance(value, bool):
            raise ValidationError(field_name, f"must be an integer, got {value!r}", value)
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            number = int(value)
        except (ValueError, TypeError):
            raise ValidationError(field_name, f"must be an integer, got {value!r}", value) from None
        if number < min_val or (max_val is not None and number > max_val):
            bound = f"between {min_val} and {max_val}" if max_val is not None else f">= {min_val}"
            raise ValidationError(field_name, f"must be {bound}, got {number}", number)
        return number

    @classmethod
    def validate_phones(cls, phones: Union[str, Sequence[Any]], layout: VocabLayout,
                        max_phones: Optional[int] = None, field_name: str = "phones") -> List[int]:
        """
        Validate a phoneme id list.

        Accepts a list of ids or a whitespace-separated string.

        Raises:
            ValidationError: empty, too long, or an id outside the phoneme range
        """
        if isinstance(phones, str):
            phones = phones.split()
        if not isinstance(phones, (list, tuple)):
            raise ValidationError(field_name, f"must be a list of ids, got {type(phones).__name__}")
        if not phones:
            raise ValidationError(field_name, "must not be empty", phones)
        if max_phones is not None and len(phones) > max_phones:
            raise ValidationError(field_name, f"at most {max_phones} phonemes, got {len(phones)}")
        ids = []
        for index, value in enumerate(phones):
            token_id = cls.validate_int_range(value, 0, None, f"{field_name}[{index}]")
            if not layout.is_phoneme(token_id):
                raise ValidationError(
                    f"{field_name}[{index}]",
                    f"id {token_id} is not in the phoneme range "
                    f"[{layout.phoneme_start}, {layout.codec_start})",
                    token_id,
                )
            ids.append(token_id)
        return ids

    @classmethod
    def validate_decode_params(cls, mode: Any = DecodeMode.GREEDY.value, temperature: Any = 1.0,
                               top_k: Any = 50, rng_seed: Any = 0,
                               max_new_tokens: Any = 256, codec_only: bool = True,
                               max_limit: int = MAX_NEW_TOKENS_LIMIT,
                               vocab_size: Optional[int] = None) -> DecodeParams:
        """Build ``DecodeParams`` from loosely typed inputs."""
        mode_value = str(mode).lower().strip()
        if mode_value not in cls.VALID_MODES:
            raise ValidationError("mode", f"must be one of {cls.VALID_MODES}, got '{mode}'", mode)
        try:
            temperature = float(temperature)
        except (TypeError, ValueError):
            raise ValidationError("temperature", f"must be a number, got {temperature!r}") from None
        if mode_value == DecodeMode.SAMPLED.value and not temperature > 0:
            raise ValidationError("temperature", f"must be > 0, got {temperature}", temperature)
        top_k = cls.validate_int_range(top_k, 1, vocab_size, "top_k")
        if not isinstance(codec_only, bool):
            raise ValidationError("codec_only", f"must be true or false, got {codec_only!r}", codec_only)
        return DecodeParams(
            mode=DecodeMode(mode_value),
            temperature=temperature,
            top_k=top_k,
            rng_seed=cls.validate_int_range(rng_seed, 0, 2**63 - 1, "rng_seed"),
            max_new_tokens=cls.validate_int_range(max_new_tokens, 0, max_limit, "max_new_tokens"),
            codec_only=codec_only,
        )

    @staticmethod
    def validate_adapter_names(names: Union[str, Sequence[Any], None],
                               field_name: str = "adapters") -> List[str]:
        """
        Validate and normalize adapter names.

        Handles both comma-separated strings and lists; rejects duplicates.
        """
        if names is None:
            return []
        if isinstance(names, str):
            name_list = [n.strip() for n in names.split(",") if n.strip()]
        elif isinstance(names, (list, tuple)):
            name_list = [str(n).strip() for n in names if str(n).strip()]
        else:
            raise ValidationError(field_name, f"must be a string or list, got {type(names).__name__}")
        duplicates = sorted({n for n in name_list if name_list.count(n) > 1})
        if duplicates:
            raise ValidationError(field_name, f"duplicate adapter names {duplicates}", names)
        return name_list

    @classmethod
    def validate_chunk_tokens(cls, chunk_tokens: Any, frame_bytes: int, max_frame: int,
                              field_name: str = "chunk_tokens") -> int:
        """Chunk size whose rendered audio fits in one frame."""
        max_tokens = max(1, max_frame // frame_bytes)
        return cls.validate_int_range(chunk_tokens, 1, max_tokens, field_name)
