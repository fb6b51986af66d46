"""
Configuration Management for the speechlm-serve engine and service

Centralized configuration handling with environment variables,
a JSON configuration file, and sensible defaults.
"""

import hashlib
import json
import logging
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .codeclm.params import ModelConfig
from .codeclm.sampling import DEFAULT_MAX_NEW_TOKENS, MAX_NEW_TOKENS_LIMIT
from .errors import InvalidArgumentError
from .kvcache import PageConfig
from .scheduler.policies import PreemptPolicy
from .tokenspace import DEFAULT_CONDITION_LEN, VocabLayout, build_vocab
from .toycodec import CodecSpec

logger = logging.getLogger(__name__)

ENV_PREFIX = "TAKIN_"
CONFIG_ENV_VAR = "TAKIN_CONFIG"
# BP, EP and S around the phonemes
PREFIX_OVERHEAD = 3
DEFAULT_MAX_FRAME = 1 << 20


class LogLevel(str, Enum):
    """Logging levels"""
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"
    CRITICAL = "CRITICAL"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSettings(_Section):
    d_model: int = Field(default=128, ge=1, le=4096, description="Hidden width")
    n_layers: int = Field(default=4, ge=1, le=64, description="Transformer layers")
    n_heads: int = Field(default=4, ge=1, le=64, description="Attention heads")
    ffn_dim: int = Field(default=512, ge=1, le=16384, description="Feed-forward width")
    max_positions: int = Field(default=2048, ge=8, le=65536,
                               description="Condition slots plus tokens per sequence")
    condition_len: int = Field(default=DEFAULT_CONDITION_LEN, ge=0, le=256,
                               description="Condition embedding slots before BP")
    seed: int = Field(default=0, ge=0, le=2**64 - 1, description="Parameter init seed")
    quantize: bool = Field(default=False, description="Serve int8-quantized weights")


class VocabSettings(_Section):
    phoneme_count: int = Field(default=128, ge=1, description="Phoneme vocabulary size")
    codec_count: int = Field(default=1024, ge=1, description="Codec codebook size")


class CodecSettings(_Section):
    sample_rate: int = Field(default=24000, ge=1000, le=192000, description="PCM sample rate")
    frame_len: int = Field(default=2048, ge=2, le=65536, description="Samples per codec token")
    amplitude: float = Field(default=0.5, gt=0.0, le=1.0, description="Tone amplitude")
    embed_dim: int = Field(default=64, ge=1, le=4096, description="Prompt embedding width")


class CacheSettings(_Section):
    pages: int = Field(default=512, ge=1, description="KV pages in the pool")
    page_size: int = Field(default=16, ge=1, le=4096, description="Token positions per page")


class SchedulerSettings(_Section):
    max_batch: int = Field(default=8, ge=1, le=256, description="Decode batch size")
    queue_capacity: int = Field(default=64, ge=1, description="Queued requests before queue-full")
    preempt_policy: PreemptPolicy = Field(default=PreemptPolicy.YOUNGEST_FIRST,
                                          description="Victim choice under page pressure")
    default_max_new_tokens: int = Field(default=DEFAULT_MAX_NEW_TOKENS, ge=0,
                                        description="Generation cap when a request names none")
    max_new_tokens_limit: int = Field(default=MAX_NEW_TOKENS_LIMIT, ge=1,
                                      le=MAX_NEW_TOKENS_LIMIT,
                                      description="Largest generation cap a request may ask for")

    @field_validator("preempt_policy", mode="before")
    @classmethod
    def validate_preempt_policy(cls, v):
        if isinstance(v, str):
            return PreemptPolicy(v.lower().strip())
        return v


class ServerSettings(_Section):
    host: str = Field(default="127.0.0.1", description="Listen address")
    port: int = Field(default=7070, ge=0, le=65535, description="TCP port, 0 for ephemeral")
    max_frame: int = Field(default=DEFAULT_MAX_FRAME, ge=1024, le=1 << 30,
                           description="Largest frame payload in bytes")
    chunk_tokens: int = Field(default=8, ge=1, description="Default codec tokens per audio frame")
    max_phones: int = Field(default=256, ge=1, description="Longest accepted phoneme sequence")
    prompt_cache_size: int = Field(default=64, ge=1, description="Cached prompt embeddings")
    drain_timeout: float = Field(default=10.0, ge=0.0, le=600.0,
                                 description="Seconds to drain in-flight requests on shutdown")


class EvalSettings(_Section):
    frames_per_phone: int = Field(default=4, ge=1, description="Expected codec tokens per phoneme")
    length_tolerance: float = Field(default=0.3, ge=0.0, description="Allowed relative length deviation")
    repeat_ngram: int = Field(default=4, ge=1, description="n-gram size of the repetition detector")
    repeat_count: int = Field(default=4, ge=2, description="Consecutive repeats that flag a loop")
    samples_per_sentence: int = Field(default=5, ge=2, description="Sampled decodes per sentence")
    agreement_threshold: float = Field(default=0.95, ge=0.0, le=1.0,
                                       description="Minimum quantized/float greedy agreement")


class ServeConfig(BaseSettings):
    """
    Configuration model for the engine, the server and the tooling.

    Supports configuration via:
    - Keyword overrides (CLI flags)
    - A JSON file named by ``--config`` or ``TAKIN_CONFIG``
    - Environment variables (prefixed with TAKIN_, ``__`` between section and field)
    - Default values
    """

    model: ModelSettings = Field(default_factory=ModelSettings)
    vocab: VocabSettings = Field(default_factory=VocabSettings)
    codec: CodecSettings = Field(default_factory=CodecSettings)
    cache: CacheSettings = Field(default_factory=CacheSettings)
    scheduler: SchedulerSettings = Field(default_factory=SchedulerSettings)
    server: ServerSettings = Field(default_factory=ServerSettings)
    eval: EvalSettings = Field(default_factory=EvalSettings)

    log_level: LogLevel = Field(
        default=LogLevel.INFO,
        description="Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)"
    )
    log_file_path: Optional[Path] = Field(
        default=None,
        description="Path to log file (if None, logs to console only)"
    )
    event_log_path: Optional[Path] = Field(
        default=None,
        description="JSON-lines request event log (if None, events go to the main log)"
    )

    model_config = SettingsConfigDict(
        env_prefix=ENV_PREFIX,
        env_nested_delimiter="__",
        case_sensitive=False,
        extra="forbid",
        # TAKIN_LOG_LEVEL=DEBUG
        # TAKIN_CACHE__PAGES=1024
        # TAKIN_SERVER__PORT=7171
    )

    @field_validator("log_level", mode="before")
    @classmethod
    def validate_log_level(cls, v):
        if isinstance(v, str):
            return LogLevel(v.upper().strip())
        return v

    @field_validator("log_file_path", "event_log_path", mode="before")
    @classmethod
    def validate_paths(cls, v):
        if v is not None and v != "":
            return Path(v)
        return None

    @model_validator(mode="after")
    def check_geometry(self):
        half_frame = self.codec.frame_len // 2
        if self.vocab.codec_count > half_frame:
            raise ValueError(
                f"vocab.codec_count ({self.vocab.codec_count}) must be <= "
                f"codec.frame_len / 2 ({half_frame})"
            )
        if self.model.d_model % self.model.n_heads:
            raise ValueError(
                f"model.d_model ({self.model.d_model}) must be divisible by "
                f"model.n_heads ({self.model.n_heads})"
            )
        needed = self.max_request_positions
        if self.model.max_positions < needed:
            raise ValueError(
                f"model.max_positions ({self.model.max_positions}) must be >= "
                f"model.condition_len + server.max_phones + {PREFIX_OVERHEAD} + "
                f"scheduler.max_new_tokens_limit + 1 ({needed})"
            )
        if self.scheduler.default_max_new_tokens > self.scheduler.max_new_tokens_limit:
            raise ValueError(
                f"scheduler.default_max_new_tokens ({self.scheduler.default_max_new_tokens}) "
                f"exceeds scheduler.max_new_tokens_limit ({self.scheduler.max_new_tokens_limit})"
            )
        chunk_bytes = self.server.chunk_tokens * self.frame_bytes
        if chunk_bytes > self.server.max_frame:
            raise ValueError(
                f"server.chunk_tokens ({self.server.chunk_tokens}) renders {chunk_bytes} bytes, "
                f"more than server.max_frame ({self.server.max_frame})"
            )
        return self

    @property
    def max_request_positions(self) -> int:
        """Positions of the longest admissible request, final E included."""
        return (self.model.condition_len + self.server.max_phones + PREFIX_OVERHEAD
                + self.scheduler.max_new_tokens_limit + 1)

    @property
    def frame_bytes(self) -> int:
        """Bytes of 16-bit PCM one codec token renders to."""
        return self.codec.frame_len * 2

    def vocab_layout(self) -> VocabLayout:
        return build_vocab(self.vocab.phoneme_count, self.vocab.codec_count)

    def lm_config(self) -> ModelConfig:
        return ModelConfig(
            vocab=self.vocab_layout(),
            d_model=self.model.d_model,
            n_layers=self.model.n_layers,
            n_heads=self.model.n_heads,
            ffn_dim=self.model.ffn_dim,
            max_positions=self.model.max_positions,
            condition_len=self.model.condition_len,
            prompt_dim=self.codec.embed_dim,
            seed=self.model.seed,
        )

    def page_config(self) -> PageConfig:
        return PageConfig(
            payload_shape=self.lm_config().kv_payload_shape,
            page_size=self.cache.page_size,
            num_pages=self.cache.pages,
        )

    def codec_spec(self) -> CodecSpec:
        return CodecSpec(
            sample_rate=self.codec.sample_rate,
            frame_len=self.codec.frame_len,
            amplitude=self.codec.amplitude,
            codec_count=self.vocab.codec_count,
            embed_dim=self.codec.embed_dim,
        )

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_checksum(self) -> str:
        """SHA-256 of the canonical JSON dump; equal configs give equal checksums."""
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def pool_bytes(self) -> int:
        payload = 1
        for dim in self.lm_config().kv_payload_shape:
            payload *= dim
        return self.cache.pages * self.cache.page_size * payload * 4

    def validate_environment(self) -> List[str]:
        """
        Validate the current environment and configuration.

        Returns:
            List of validation warnings/errors
        """
        issues = []

        for label, path in (("Log", self.log_file_path), ("Event log", self.event_log_path)):
            if path:
                log_dir = path.parent
                if not log_dir.exists():
                    issues.append(f"{label} directory does not exist: {log_dir}")
                elif not os.access(log_dir, os.W_OK):
                    issues.append(f"{label} directory is not writable: {log_dir}")

        pages_per_request = -(-self.max_request_positions // self.cache.page_size)
        if pages_per_request > self.cache.pages:
            issues.append(
                f"KV pool of {self.cache.pages} pages cannot hold the longest admissible "
                f"request ({pages_per_request} pages); such requests fail with resource-exhausted"
            )

        if self.pool_bytes() > 1 << 30:
            issues.append(f"KV pool needs {self.pool_bytes() / 2**30:.1f} GiB of memory")

        if 0 < self.server.port < 1024:
            issues.append(f"Port {self.server.port} is privileged")

        return issues


# Environment-specific configurations
class DevelopmentConfig(ServeConfig):
    """Development environment configuration"""

    log_level: LogLevel = LogLevel.DEBUG


class ProductionConfig(ServeConfig):
    """Production environment configuration"""

    cache: CacheSettings = Field(default_factory=lambda: CacheSettings(pages=2048))
    log_level: LogLevel = LogLevel.INFO


class TestingConfig(ServeConfig):
    """Testing environment configuration"""

    server: ServerSettings = Field(default_factory=lambda: ServerSettings(port=0))
    log_level: LogLevel = LogLevel.WARNING


# Configuration factory
def get_config(environment: str = "development", **overrides: Any) -> ServeConfig:
    """
    Get configuration for specific environment.

    Args:
        environment: Environment name (development, production, testing)

    Returns:
        Appropriate configuration instance
    """
    env_configs = {
        "development": DevelopmentConfig,
        "production": ProductionConfig,
        "testing": TestingConfig,
    }

    config_class = env_configs.get(environment.lower(), ServeConfig)
    return config_class(**overrides)


def _load_dotenv(env_file: Optional[Path]) -> None:
    path = env_file or Path(".env")
    if env_file is not None and not env_file.exists():
        raise InvalidArgumentError(f".env file not found: {env_file}")
    if not path.exists():
        return
    try:
        from dotenv import load_dotenv
    except ImportError:
        logger.warning(
            "python-dotenv not installed. Install it to use .env files: "
            "pip install 'speechlm-serve[config]'"
        )
        return
    load_dotenv(path, override=True)
    logger.info(f"Loaded .env file from {path.absolute()}")


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InvalidArgumentError(f"config file not found: {path}") from None
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise InvalidArgumentError(f"cannot read config file {path}: {e}") from None
    if not isinstance(data, dict):
        raise InvalidArgumentError(f"config file {path} must hold a JSON object")
    return data


def _deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(path: Optional[Union[str, Path]] = None,
                overrides: Optional[Dict[str, Any]] = None,
                env_file: Optional[Path] = None,
                environment: Optional[str] = None) -> ServeConfig:
    """
    Resolve the configuration from every source.

    Precedence: ``overrides`` > JSON file > ``TAKIN_*`` environment > defaults.
    ``overrides`` is nested by section, e.g. ``{"server": {"port": 0}}``.

    Raises:
        InvalidArgumentError: unreadable config file
        pydantic.ValidationError: a field fails validation
    """
    _load_dotenv(env_file)
    path = path or os.environ.get(CONFIG_ENV_VAR) or None
    values = read_config_file(path) if path else {}
    if overrides:
        values = _deep_merge(values, overrides)
    config = get_config(environment, **values) if environment else ServeConfig(**values)
    logger.debug(f"Resolved configuration (checksum {config.config_checksum()[:12]})")
    return config
