"""
Unit tests for parameter validation module.
"""

import pytest

from speechlm_serve.codeclm import DecodeMode
from speechlm_serve.errors import InvalidArgumentError
from speechlm_serve.parameter_validator import ParameterValidator, ValidationError
from speechlm_serve.tokenspace import build_vocab


@pytest.fixture
def small_layout():
    return build_vocab(10, 20)


class TestValidateIntRange:
    """Tests for integer range validation."""

    def test_valid_int(self):
        """Test valid integer."""
        assert ParameterValidator.validate_int_range(5, 1, 10) == 5

    def test_valid_string(self):
        """Test numeric strings are converted."""
        assert ParameterValidator.validate_int_range("7", 1, 10) == 7

    def test_integral_float(self):
        """Test integral floats are accepted."""
        assert ParameterValidator.validate_int_range(3.0, 1, 10) == 3

    def test_fractional_float(self):
        """Test fractional floats are rejected."""
        with pytest.raises(ValidationError, match="must be an integer"):
            ParameterValidator.validate_int_range(3.5, 1, 10)

    def test_boolean_rejected(self):
        """Test booleans are not integers here."""
        with pytest.raises(ValidationError):
            ParameterValidator.validate_int_range(True, 0, 10)

    def test_out_of_range(self):
        """Test values outside the bounds."""
        with pytest.raises(ValidationError) as exc_info:
            ParameterValidator.validate_int_range(11, 1, 10, "top_k")
        assert "top_k: must be between 1 and 10" in str(exc_info.value)
        assert exc_info.value.field == "top_k"
        assert exc_info.value.details == {"field": "top_k"}

    def test_unbounded_max(self):
        """Test a missing maximum means no upper bound."""
        assert ParameterValidator.validate_int_range(10**9, 0) == 10**9
        with pytest.raises(ValidationError, match=">= 0"):
            ParameterValidator.validate_int_range(-1, 0)

    def test_is_invalid_argument(self):
        """Test validation errors map to invalid-argument."""
        with pytest.raises(InvalidArgumentError):
            ParameterValidator.validate_int_range("abc", 0, 1)


class TestValidatePhones:
    """Tests for phoneme id list validation."""

    def test_list(self, small_layout):
        """Test a list of phoneme ids."""
        assert ParameterValidator.validate_phones([5, "6", 14], small_layout) == [5, 6, 14]

    def test_string(self, small_layout):
        """Test a whitespace-separated string."""
        assert ParameterValidator.validate_phones("5 6\t7", small_layout) == [5, 6, 7]

    def test_empty(self, small_layout):
        """Test empty sequences are rejected."""
        with pytest.raises(ValidationError, match="must not be empty"):
            ParameterValidator.validate_phones([], small_layout)

    def test_too_long(self, small_layout):
        """Test the maximum length."""
        with pytest.raises(ValidationError, match="at most 2 phonemes"):
            ParameterValidator.validate_phones([5, 6, 7], small_layout, max_phones=2)

    def test_codec_id_rejected(self, small_layout):
        """Test ids outside the phoneme range name their index."""
        with pytest.raises(ValidationError) as exc_info:
            ParameterValidator.validate_phones([5, 15], small_layout)
        assert exc_info.value.field == "phones[1]"
        assert "[5, 15)" in exc_info.value.message

    def test_wrong_type(self, small_layout):
        """Test non-sequence inputs."""
        with pytest.raises(ValidationError, match="must be a list"):
            ParameterValidator.validate_phones(5, small_layout)


class TestValidateDecodeParams:
    """Tests for decode parameter validation."""

    def test_defaults(self):
        """Test the default greedy parameters."""
        params = ParameterValidator.validate_decode_params()
        assert params.mode == DecodeMode.GREEDY
        assert params.max_new_tokens == 256 and params.codec_only

    def test_sampled_from_strings(self):
        """Test loosely typed sampled parameters."""
        params = ParameterValidator.validate_decode_params(
            mode="Sampled", temperature="0.7", top_k="20", rng_seed="3",
            max_new_tokens="40", codec_only=False,
        )
        assert params.mode == DecodeMode.SAMPLED
        assert (params.temperature, params.top_k, params.rng_seed) == (0.7, 20, 3)
        assert params.max_new_tokens == 40 and params.codec_only is False

    @pytest.mark.parametrize("value", ["false", 0, None])
    def test_codec_only_must_be_bool(self, value):
        """Test codec_only accepts only real booleans."""
        with pytest.raises(ValidationError) as exc_info:
            ParameterValidator.validate_decode_params(codec_only=value)
        assert exc_info.value.field == "codec_only"

    def test_bad_mode(self):
        """Test unknown modes."""
        with pytest.raises(ValidationError, match="must be one of"):
            ParameterValidator.validate_decode_params(mode="beam")

    def test_sampled_needs_positive_temperature(self):
        """Test zero temperature in sampled mode."""
        with pytest.raises(ValidationError) as exc_info:
            ParameterValidator.validate_decode_params(mode="sampled", temperature=0)
        assert exc_info.value.field == "temperature"

    def test_greedy_ignores_temperature(self):
        """Test greedy mode accepts any temperature."""
        assert ParameterValidator.validate_decode_params(temperature=0).mode == DecodeMode.GREEDY

    def test_limits(self):
        """Test max_new_tokens and top_k bounds."""
        with pytest.raises(ValidationError, match="max_new_tokens"):
            ParameterValidator.validate_decode_params(max_new_tokens=65, max_limit=64)
        with pytest.raises(ValidationError, match="top_k"):
            ParameterValidator.validate_decode_params(top_k=100, vocab_size=85)


class TestValidateAdapterNames:
    """Tests for adapter name validation."""

    def test_none(self):
        """Test None means no adapters."""
        assert ParameterValidator.validate_adapter_names(None) == []

    def test_comma_string(self):
        """Test comma-separated names."""
        assert ParameterValidator.validate_adapter_names("news, alice,") == ["news", "alice"]

    def test_list(self):
        """Test lists are stripped."""
        assert ParameterValidator.validate_adapter_names([" news ", "", "alice"]) == ["news", "alice"]

    def test_duplicates(self):
        """Test duplicate names are rejected."""
        with pytest.raises(ValidationError, match="duplicate adapter names"):
            ParameterValidator.validate_adapter_names(["news", "news"])

    def test_wrong_type(self):
        """Test non-string, non-list inputs."""
        with pytest.raises(ValidationError):
            ParameterValidator.validate_adapter_names(3)


class TestValidateChunkTokens:
    """Tests for chunk size validation."""

    def test_fits(self):
        """Test a chunk that renders within one frame."""
        assert ParameterValidator.validate_chunk_tokens(8, frame_bytes=4096, max_frame=1 << 20) == 8

    def test_too_large(self):
        """Test a chunk whose audio exceeds the frame limit."""
        with pytest.raises(ValidationError, match="between 1 and 256"):
            ParameterValidator.validate_chunk_tokens(257, frame_bytes=4096, max_frame=1 << 20)

    def test_tiny_frame_limit(self):
        """Test at least one token is always allowed."""
        assert ParameterValidator.validate_chunk_tokens(1, frame_bytes=4096, max_frame=1024) == 1
