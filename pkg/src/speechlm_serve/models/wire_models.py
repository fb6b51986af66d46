"""
Control message schemas for the streaming protocol.

Pydantic models for the JSON carried in ``0x01`` control frames, discriminated
by the ``op`` field. Unknown fields are rejected.
"""

from enum import Enum
from typing import Annotated, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, field_validator, model_validator

from ..codeclm.sampling import DEFAULT_MAX_NEW_TOKENS, MAX_NEW_TOKENS_LIMIT, DecodeMode, DecodeParams


class ControlOp(str, Enum):
    """Control operations"""
    SYNTHESIZE = "synthesize"
    LOAD_ADAPTER = "load_adapter"
    UNLOAD_ADAPTER = "unload_adapter"
    LIST_ADAPTERS = "list_adapters"
    METRICS = "metrics"


class BaseWireModel(BaseModel):
    """Base model for all control messages"""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class DecodeSettings(BaseWireModel):
    """Decoding parameters of a synthesis request"""

    mode: DecodeMode = Field(DecodeMode.GREEDY, description="greedy or sampled")
    temperature: float = Field(1.0, gt=0, description="Softmax temperature (sampled mode)")
    top_k: int = Field(50, ge=1, description="Candidates kept before sampling")
    rng_seed: int = Field(0, ge=0, description="Seed of the per-request generator")
    max_new_tokens: Optional[int] = Field(
        None, ge=0, le=MAX_NEW_TOKENS_LIMIT, description="Generation cap, server default when omitted"
    )
    codec_only: bool = Field(True, description="Restrict candidates to codec tokens and E")

    @field_validator("mode", mode="before")
    @classmethod
    def normalize_mode(cls, v):
        return v.lower().strip() if isinstance(v, str) else v

    def to_params(self, default_max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS) -> DecodeParams:
        max_new_tokens = self.max_new_tokens
        if max_new_tokens is None:
            max_new_tokens = default_max_new_tokens
        return DecodeParams(
            mode=self.mode,
            temperature=self.temperature,
            top_k=self.top_k,
            rng_seed=self.rng_seed,
            max_new_tokens=max_new_tokens,
            codec_only=self.codec_only,
        )


class SynthesizeRequest(BaseWireModel):
    """Synthesize speech for a phoneme sequence"""

    op: Literal["synthesize"] = "synthesize"
    phones: List[int] = Field(..., min_length=1, description="Phoneme vocabulary ids")
    prompt: str = Field("neutral", min_length=1, description="Preset name or base64 WAV")
    adapters: List[str] = Field(default_factory=list, description="Adapter names to stack")
    decode: DecodeSettings = Field(default_factory=DecodeSettings)
    stream: bool = Field(True, description="Stream audio chunks as they are generated")
    chunk_tokens: Optional[int] = Field(
        None, ge=1, description="Codec tokens per streamed audio frame, server default when omitted"
    )
    emit_tokens: bool = Field(False, description="Send a 0x03 token frame before each audio frame")
    request_id: Optional[str] = Field(None, min_length=1, max_length=64)

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "op": "synthesize",
                "phones": [12, 40, 33, 7],
                "prompt": "neutral",
                "adapters": ["news", "alice"],
                "decode": {"mode": "greedy", "max_new_tokens": 64},
                "stream": True,
                "chunk_tokens": 8,
            }
        }
    )

    @field_validator("adapters")
    @classmethod
    def validate_adapters(cls, v):
        names = [name.strip() for name in v]
        if any(not name for name in names):
            raise ValueError("adapter names cannot be empty")
        if len(set(names)) != len(names):
            raise ValueError("adapter names must be unique")
        return names


class LoadAdapterRequest(BaseWireModel):
    """Load a TKLA adapter from a server-side path or an inline base64 blob"""

    op: Literal["load_adapter"] = "load_adapter"
    path: Optional[str] = Field(None, min_length=1)
    blob: Optional[str] = Field(None, min_length=1, description="base64-encoded TKLA container")

    @model_validator(mode="after")
    def exactly_one_source(self):
        if (self.path is None) == (self.blob is None):
            raise ValueError("exactly one of 'path' or 'blob' is required")
        return self


class UnloadAdapterRequest(BaseWireModel):
    op: Literal["unload_adapter"] = "unload_adapter"
    name: str = Field(..., min_length=1)


class ListAdaptersRequest(BaseWireModel):
    op: Literal["list_adapters"] = "list_adapters"


class MetricsRequest(BaseWireModel):
    op: Literal["metrics"] = "metrics"


ControlMessage = Annotated[
    Union[SynthesizeRequest, LoadAdapterRequest, UnloadAdapterRequest,
          ListAdaptersRequest, MetricsRequest],
    Field(discriminator="op"),
]

_control_adapter = TypeAdapter(ControlMessage)


def parse_control(payload: dict):
    """Validate a decoded control JSON object into its request model."""
    return _control_adapter.validate_python(payload)
