"""Streaming synthesis service: framing, adapter registry, metrics, engine loop, client."""

from .client import RemoteError, SpeechLMClient, SynthesisResult
from .engine_loop import EngineLoop, safe_log
from .metrics import LATENCY_BUCKETS_MS, LatencyHistogram, Metrics
from .protocol import (
    DEFAULT_MAX_FRAME,
    HEADER,
    HEADER_SIZE,
    Frame,
    FrameType,
    decode_frame,
    encode_frame,
    read_frame,
    write_frame,
)
from .registry import AdapterRegistry
from .server import BadRequestError, SynthesisServer

__all__ = [
    "DEFAULT_MAX_FRAME",
    "HEADER",
    "HEADER_SIZE",
    "LATENCY_BUCKETS_MS",
    "AdapterRegistry",
    "BadRequestError",
    "EngineLoop",
    "Frame",
    "FrameType",
    "LatencyHistogram",
    "Metrics",
    "RemoteError",
    "SpeechLMClient",
    "SynthesisResult",
    "SynthesisServer",
    "decode_frame",
    "encode_frame",
    "read_frame",
    "safe_log",
    "write_frame",
]
