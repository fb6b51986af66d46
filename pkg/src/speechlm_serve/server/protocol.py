"""
Length-prefixed binary framing.

Every frame is a 5-byte header followed by the payload::

    u32 big-endian  payload length (header excluded)
    u8              frame type

Types: 0x01 control JSON, 0x02 audio chunk (raw PCM s16le, whole codec
frames), 0x03 token chunk (u32 little-endian vocabulary ids), 0x04 done
(JSON), 0x7F error (JSON ``{"code": ..., "message": ...}``).
"""

import asyncio
import json
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from ..errors import (
    ErrorCode,
    FrameTooLargeError,
    IncompleteFrameError,
    MalformedFrameError,
)

HEADER = struct.Struct(">IB")
HEADER_SIZE = HEADER.size
DEFAULT_MAX_FRAME = 1 << 20


class FrameType(IntEnum):
    CONTROL = 0x01
    AUDIO = 0x02
    TOKENS = 0x03
    DONE = 0x04
    ERROR = 0x7F


@dataclass(frozen=True)
class Frame:
    type: FrameType
    payload: bytes = b""

    def json(self) -> Dict[str, Any]:
        """Payload of a control, done or error frame as a JSON object."""
        try:
            value = json.loads(self.payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise MalformedFrameError(f"frame payload is not valid JSON: {e}") from None
        if not isinstance(value, dict):
            raise MalformedFrameError("frame payload must be a JSON object")
        return value

    def token_ids(self) -> Tuple[int, ...]:
        if len(self.payload) % 4:
            raise MalformedFrameError("token chunk length is not a multiple of 4")
        return tuple(int(t) for t in np.frombuffer(self.payload, dtype="<u4"))

    @classmethod
    def control(cls, message: Dict[str, Any]) -> "Frame":
        return cls(FrameType.CONTROL, _dump(message))

    @classmethod
    def done(cls, stats: Dict[str, Any]) -> "Frame":
        return cls(FrameType.DONE, _dump(stats))

    @classmethod
    def error(cls, code: ErrorCode, message: str, **details: Any) -> "Frame":
        body: Dict[str, Any] = {"code": ErrorCode(code).value, "message": message}
        if details:
            body["details"] = details
        return cls(FrameType.ERROR, _dump(body))

    @classmethod
    def audio(cls, pcm: np.ndarray) -> "Frame":
        return cls(FrameType.AUDIO, np.asarray(pcm, dtype="<i2").tobytes())

    @classmethod
    def tokens(cls, token_ids: Sequence[int]) -> "Frame":
        return cls(FrameType.TOKENS, np.asarray(token_ids, dtype="<u4").tobytes())


def _dump(message: Dict[str, Any]) -> bytes:
    return json.dumps(message, separators=(",", ":"), sort_keys=True).encode("utf-8")


def _check_header(length: int, type_byte: int, max_size: int) -> FrameType:
    if length > max_size:
        raise FrameTooLargeError(
            f"frame payload of {length} bytes is too large (max {max_size})",
            details={"length": length, "max": max_size},
        )
    try:
        return FrameType(type_byte)
    except ValueError:
        raise MalformedFrameError(f"unknown frame type 0x{type_byte:02X}") from None


def encode_frame(frame: Frame, max_size: int = DEFAULT_MAX_FRAME) -> bytes:
    _check_header(len(frame.payload), int(frame.type), max_size)
    return HEADER.pack(len(frame.payload), int(frame.type)) + frame.payload


def decode_frame(data: bytes, max_size: int = DEFAULT_MAX_FRAME) -> Tuple[Frame, int]:
    """Decode the frame at the start of ``data``; returns it with the bytes consumed."""
    if len(data) < HEADER_SIZE:
        raise IncompleteFrameError(f"need {HEADER_SIZE} header bytes, have {len(data)}")
    length, type_byte = HEADER.unpack_from(data)
    frame_type = _check_header(length, type_byte, max_size)
    end = HEADER_SIZE + length
    if len(data) < end:
        raise IncompleteFrameError(f"need {length} payload bytes, have {len(data) - HEADER_SIZE}")
    return Frame(frame_type, bytes(data[HEADER_SIZE:end])), end


async def read_frame(reader: asyncio.StreamReader,
                     max_size: int = DEFAULT_MAX_FRAME) -> Optional[Frame]:
    """Read one frame; None on a clean end of stream between frames."""
    try:
        header = await reader.readexactly(HEADER_SIZE)
    except asyncio.IncompleteReadError as e:
        if not e.partial:
            return None
        raise IncompleteFrameError("stream ended inside a frame header") from None
    length, type_byte = HEADER.unpack(header)
    frame_type = _check_header(length, type_byte, max_size)
    try:
        payload = await reader.readexactly(length) if length else b""
    except asyncio.IncompleteReadError:
        raise IncompleteFrameError(f"stream ended inside a {length}-byte payload") from None
    return Frame(frame_type, payload)


async def write_frame(writer: asyncio.StreamWriter, frame: Frame,
                      max_size: int = DEFAULT_MAX_FRAME) -> None:
    writer.write(encode_frame(frame, max_size))
    await writer.drain()
