"""
Asyncio client for the synthesis server.

Used by the benchmark, the integration tests and operators poking at a
running service.
"""

import asyncio
import base64
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ErrorCode, IncompleteFrameError, MalformedFrameError, SpeechLMError
from ..toycodec import pcm_from_bytes
from .protocol import DEFAULT_MAX_FRAME, Frame, FrameType, read_frame, write_frame

logger = logging.getLogger(__name__)


class RemoteError(SpeechLMError):
    """An error frame sent by the server."""

    def __init__(self, body: Dict[str, Any]):
        try:
            code = ErrorCode(body.get("code"))
        except ValueError:
            code = ErrorCode.INTERNAL
        super().__init__(str(body.get("message", "")), code=code, details=body.get("details"))
        self.remote_code = body.get("code")


@dataclass
class SynthesisResult:
    """Everything the server sent back for one synthesize request."""
    audio_chunks: List[bytes] = field(default_factory=list)
    token_chunks: List[Tuple[int, ...]] = field(default_factory=list)
    done: Dict[str, Any] = field(default_factory=dict)
    first_audio_ms: Optional[float] = None
    total_ms: float = 0.0

    @property
    def pcm(self) -> np.ndarray:
        return pcm_from_bytes(b"".join(self.audio_chunks))

    @property
    def tokens(self) -> List[int]:
        return list(self.done.get("tokens", []))

    @property
    def terminated(self) -> bool:
        return bool(self.done.get("terminated", False))


class SpeechLMClient:
    """One connection; requests on it are served one at a time."""

    def __init__(self, host: str = "127.0.0.1", port: int = 7070,
                 max_frame: int = DEFAULT_MAX_FRAME, timeout: Optional[float] = 60.0):
        self.host = host
        self.port = port
        self.max_frame = max_frame
        self.timeout = timeout
        self._reader: Optional[asyncio.StreamReader] = None
        self._writer: Optional[asyncio.StreamWriter] = None

    async def connect(self) -> "SpeechLMClient":
        self._reader, self._writer = await asyncio.open_connection(self.host, self.port)
        return self

    async def close(self) -> None:
        if self._writer is not None:
            self._writer.close()
            try:
                await self._writer.wait_closed()
            except (ConnectionError, OSError):
                pass
            self._writer = None
            self._reader = None

    async def __aenter__(self) -> "SpeechLMClient":
        return await self.connect()

    async def __aexit__(self, *exc_info) -> None:
        await self.close()

    async def send(self, message: Dict[str, Any]) -> None:
        if self._writer is None:
            raise ConnectionError("client is not connected")
        await write_frame(self._writer, Frame.control(message), self.max_frame)

    async def receive(self) -> Frame:
        frame = await asyncio.wait_for(read_frame(self._reader, self.max_frame), self.timeout)
        if frame is None:
            raise IncompleteFrameError("server closed the connection")
        return frame

    async def request(self, message: Dict[str, Any]) -> Dict[str, Any]:
        """Send a control message and return the control response.

        Raises:
            RemoteError: the server answered with an error frame
        """
        await self.send(message)
        frame = await self.receive()
        if frame.type == FrameType.ERROR:
            raise RemoteError(frame.json())
        if frame.type != FrameType.CONTROL:
            raise MalformedFrameError(f"expected a control response, got 0x{int(frame.type):02X}")
        return frame.json()

    async def synthesize(self, phones: Sequence[int], prompt: str = "neutral",
                         adapters: Sequence[str] = (), decode: Optional[Dict[str, Any]] = None,
                         stream: bool = True, chunk_tokens: Optional[int] = None,
                         emit_tokens: bool = False,
                         request_id: Optional[str] = None) -> SynthesisResult:
        """Run one synthesis and collect its frames.

        Raises:
            RemoteError: the request was rejected or failed
        """
        message: Dict[str, Any] = {
            "op": "synthesize",
            "phones": [int(p) for p in phones],
            "prompt": prompt,
            "adapters": list(adapters),
            "stream": stream,
            "emit_tokens": emit_tokens,
        }
        if decode:
            message["decode"] = dict(decode)
        if chunk_tokens is not None:
            message["chunk_tokens"] = chunk_tokens
        if request_id is not None:
            message["request_id"] = request_id

        result = SynthesisResult()
        await self.send(message)
        started = time.perf_counter()
        while True:
            frame = await self.receive()
            if frame.type == FrameType.AUDIO:
                if result.first_audio_ms is None:
                    result.first_audio_ms = (time.perf_counter() - started) * 1000.0
                result.audio_chunks.append(frame.payload)
            elif frame.type == FrameType.TOKENS:
                result.token_chunks.append(frame.token_ids())
            elif frame.type == FrameType.DONE:
                result.done = frame.json()
                result.total_ms = (time.perf_counter() - started) * 1000.0
                return result
            elif frame.type == FrameType.ERROR:
                raise RemoteError(frame.json())
            else:
                raise MalformedFrameError(f"unexpected frame type 0x{int(frame.type):02X}")

    async def load_adapter(self, path: Optional[str] = None,
                           blob: Optional[bytes] = None) -> Dict[str, Any]:
        message: Dict[str, Any] = {"op": "load_adapter"}
        if path is not None:
            message["path"] = str(path)
        if blob is not None:
            message["blob"] = base64.b64encode(blob).decode("ascii")
        return await self.request(message)

    async def unload_adapter(self, name: str) -> Dict[str, Any]:
        return await self.request({"op": "unload_adapter", "name": name})

    async def list_adapters(self) -> List[Dict[str, Any]]:
        return (await self.request({"op": "list_adapters"}))["adapters"]

    async def metrics(self) -> Dict[str, Any]:
        return await self.request({"op": "metrics"})
