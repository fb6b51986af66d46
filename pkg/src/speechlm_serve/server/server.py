"""Streaming synthesis server speaking the length-prefixed frame protocol."""

import asyncio
import base64
import binascii
import hashlib
import logging
import time
from contextlib import suppress
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError as PydanticValidationError

from ..codeclm.decode import ModelParams
from ..codeclm.params import init_params
from ..codeclm.quant import quantize_weights
from ..codeclm.sampling import DecodeMode
from ..config import ServeConfig
from ..errors import ErrorCode, InvalidArgumentError, MalformedFrameError, ProtocolError, SpeechLMError
from ..kvcache import PagedKVCache
from ..models.response_models import ErrorDetails
from ..models.wire_models import (
    ListAdaptersRequest,
    LoadAdapterRequest,
    MetricsRequest,
    SynthesizeRequest,
    UnloadAdapterRequest,
    parse_control,
)
from ..parameter_validator import ParameterValidator
from ..scheduler import Engine, EngineEvent, EventKind, Request
from ..services.cache_manager import CacheManager
from ..services.error_handler import ErrorHandler
from ..tokenspace import PhonemeSeq, compose_inference_prefix
from ..toycodec import PRESET_TOKENS, PromptAudio, preset_audio, prompt_embed, tokens_to_pcm, wav_from_bytes
from .engine_loop import EngineLoop
from .metrics import Metrics
from .protocol import Frame, FrameType, read_frame, write_frame
from .registry import AdapterRegistry

logger = logging.getLogger(__name__)


class BadRequestError(SpeechLMError):
    code = ErrorCode.BAD_REQUEST


class SynthesisServer:
    """TCP front end: one handler per connection, one engine loop for all of them."""

    def __init__(self, config: ServeConfig, params: Optional[ModelParams] = None,
                 registry: Optional[AdapterRegistry] = None):
        """Initialize the server.

        Args:
            config: Resolved service configuration
            params: Model weights; built from ``config.model`` when omitted
            registry: Adapter registry; an empty one when omitted
        """
        self.config = config
        self.layout = config.vocab_layout()
        self.codec = config.codec_spec()
        model_config = config.lm_config()
        if params is None:
            params = init_params(model_config)
            if config.model.quantize:
                params = quantize_weights(params)
        self.params = params
        self.registry = registry or AdapterRegistry(model_config)
        self.cache = PagedKVCache(config.page_config())
        self.engine = Engine(
            params,
            self.cache,
            self.registry,
            max_batch=config.scheduler.max_batch,
            queue_capacity=config.scheduler.queue_capacity,
            preempt_policy=config.scheduler.preempt_policy,
        )
        self.metrics = Metrics()
        self.loop = EngineLoop(self.engine, self.metrics)
        self.error_handler = ErrorHandler(logger)
        self._prompts = CacheManager(max_entries=config.server.prompt_cache_size)
        self._server: Optional[asyncio.AbstractServer] = None
        self._connections: Dict[asyncio.Task, bool] = {}
        self._port: Optional[int] = None

    @property
    def port(self) -> int:
        """Bound port; differs from the configured one when that was 0."""
        if self._port is None:
            raise RuntimeError("server is not listening")
        return self._port

    @property
    def max_frame(self) -> int:
        return self.config.server.max_frame

    async def start(self) -> None:
        await self.loop.start()
        try:
            self._server = await asyncio.start_server(
                self._handle_connection, self.config.server.host, self.config.server.port
            )
        except OSError:
            await self.loop.stop(timeout=0)
            raise
        self._port = self._server.sockets[0].getsockname()[1]
        logger.info(
            f"Listening on {self.config.server.host}:{self._port} "
            f"(max_frame={self.max_frame}, chunk_tokens={self.config.server.chunk_tokens})"
        )

    async def stop(self, timeout: Optional[float] = None) -> None:
        """Stop accepting, drain in-flight requests, then close every connection."""
        if timeout is None:
            timeout = self.config.server.drain_timeout
        if self._server is not None:
            self._server.close()
        await self.loop.stop(timeout=timeout)

        busy = [task for task, active in self._connections.items() if active]
        if busy:
            await asyncio.wait(busy, timeout=max(timeout, 1.0))
        for task in list(self._connections):
            task.cancel()
        if self._connections:
            await asyncio.gather(*self._connections, return_exceptions=True)
        if self._server is not None:
            with suppress(Exception):
                await self._server.wait_closed()
            self._server = None
        logger.info("Server stopped")

    async def serve_until(self, stop_event: asyncio.Event) -> None:
        await self.start()
        try:
            await stop_event.wait()
        finally:
            await self.stop()

    # -- connections -----------------------------------------------------

    async def _handle_connection(self, reader: asyncio.StreamReader,
                                 writer: asyncio.StreamWriter) -> None:
        task = asyncio.current_task()
        self._connections[task] = False
        peer = writer.get_extra_info("peername")
        logger.debug(f"Connection from {peer}")
        try:
            while True:
                try:
                    frame = await read_frame(reader, self.max_frame)
                except ProtocolError as e:
                    # The stream position is unknown after a bad header.
                    await self._send_error(writer, e, "read_frame")
                    break
                if frame is None:
                    break
                received_at = time.perf_counter()
                if frame.type != FrameType.CONTROL:
                    await self._send_error(writer, MalformedFrameError(
                        f"expected a control frame, got type 0x{int(frame.type):02X}"
                    ), "read_frame")
                    continue
                self._connections[task] = True
                try:
                    await self._dispatch(frame, received_at, writer)
                finally:
                    self._connections[task] = False
        except (ConnectionError, asyncio.IncompleteReadError) as e:
            logger.debug(f"Connection from {peer} dropped: {e}")
        except asyncio.CancelledError:
            pass
        finally:
            self._connections.pop(task, None)
            writer.close()
            with suppress(Exception):
                await writer.wait_closed()

    async def _dispatch(self, frame: Frame, received_at: float,
                        writer: asyncio.StreamWriter) -> None:
        try:
            message = parse_control(frame.json())
        except MalformedFrameError as e:
            await self._send_error(writer, BadRequestError(e.message), "parse_control")
            return
        except PydanticValidationError as e:
            await self._send_error(writer, e, "parse_control")
            return

        if isinstance(message, SynthesizeRequest):
            await self.handle_synthesize(message, received_at, writer)
            return
        operation = message.op
        try:
            if isinstance(message, LoadAdapterRequest):
                body = await self.handle_load_adapter(message)
            elif isinstance(message, UnloadAdapterRequest):
                body = self.handle_unload_adapter(message)
            elif isinstance(message, ListAdaptersRequest):
                body = self.handle_list_adapters()
            elif isinstance(message, MetricsRequest):
                body = self.handle_metrics()
            else:
                raise BadRequestError(f"unsupported op {operation!r}")
        except Exception as e:
            await self._send_error(writer, e, operation)
            return
        await write_frame(writer, Frame.control({"op": operation, "ok": True, **body}),
                          self.max_frame)

    async def _send_error(self, writer: asyncio.StreamWriter, error: BaseException,
                          operation: str, context: Optional[Dict[str, Any]] = None) -> ErrorDetails:
        details = self.error_handler.handle(error, operation, context)
        await self._write_error(writer, details)
        return details

    async def _write_error(self, writer: asyncio.StreamWriter, details: ErrorDetails) -> None:
        body = details.to_wire()
        frame = Frame.error(ErrorCode(body["code"]), body["message"], **(body.get("details") or {}))
        with suppress(ConnectionError):
            await write_frame(writer, frame, self.max_frame)

    # -- synthesize ------------------------------------------------------

    def build_request(self, message: SynthesizeRequest) -> Tuple[Request, int]:
        """Validate a synthesize message into an engine request and its chunk size.

        Raises:
            InvalidArgumentError: out-of-range field values
            BadRequestError: prompt or size constraints the request cannot meet
        """
        server = self.config.server
        phones = ParameterValidator.validate_phones(message.phones, self.layout, server.max_phones)
        names = ParameterValidator.validate_adapter_names(message.adapters)

        decode_params = message.decode.to_params(self.config.scheduler.default_max_new_tokens)
        ParameterValidator.validate_int_range(
            decode_params.max_new_tokens, 0, self.config.scheduler.max_new_tokens_limit,
            "decode.max_new_tokens",
        )
        if decode_params.mode == DecodeMode.SAMPLED:
            ParameterValidator.validate_int_range(
                decode_params.top_k, 1, self.layout.total_size, "decode.top_k"
            )

        frame_bytes = self.config.frame_bytes
        chunk = message.chunk_tokens if message.chunk_tokens is not None else server.chunk_tokens
        chunk = ParameterValidator.validate_chunk_tokens(chunk, frame_bytes, self.max_frame)
        if not message.stream and decode_params.max_new_tokens * frame_bytes > self.max_frame:
            limit = self.max_frame // frame_bytes
            raise BadRequestError(
                f"stream=false audio for {decode_params.max_new_tokens} tokens exceeds the "
                f"{self.max_frame}-byte frame limit; use stream=true or max_new_tokens <= {limit}",
                details={"max_new_tokens_limit": limit},
            )

        condition = self.prompt_embedding(message.prompt)
        prefix = compose_inference_prefix(
            self.config.model.condition_len, PhonemeSeq.of(self.layout, phones)
        )
        kwargs = {"id": message.request_id} if message.request_id else {}
        request = Request(prefix, condition, decode_params, tuple(names), message.stream, **kwargs)
        return request, chunk

    def prompt_embedding(self, prompt: str) -> np.ndarray:
        """Condition embeddings for a preset name or a base64 WAV, cached by content."""
        if prompt in PRESET_TOKENS:
            key = ("preset", prompt)
        else:
            try:
                blob = base64.b64decode(prompt, validate=True)
            except (binascii.Error, ValueError):
                raise BadRequestError(
                    f"prompt is neither a preset {sorted(PRESET_TOKENS)} nor base64 WAV data"
                ) from None
            key = ("wav", hashlib.sha256(blob).hexdigest())
        cached = self._prompts.get(key)
        if cached is not None:
            return cached

        if key[0] == "preset":
            audio = preset_audio(self.codec, prompt)
        else:
            audio = wav_from_bytes(blob)
            self._check_sample_rate(audio)
        embedding = prompt_embed(self.codec, audio, self.config.model.condition_len,
                                 seed=self.config.model.seed)
        embedding.setflags(write=False)
        self._prompts.set(key, embedding)
        return embedding

    def _check_sample_rate(self, audio: PromptAudio) -> None:
        if audio.sample_rate != self.codec.sample_rate:
            raise InvalidArgumentError(
                f"prompt sample rate {audio.sample_rate} Hz, expected {self.codec.sample_rate} Hz"
            )

    async def handle_synthesize(self, message: SynthesizeRequest, received_at: float,
                                writer: asyncio.StreamWriter) -> None:
        """Run one synthesis and stream its frames; ends with a done or error frame."""
        try:
            request, chunk = self.build_request(message)
        except Exception as e:
            await self._send_error(writer, e, "synthesize")
            return

        result, events = await self.loop.submit(request)
        if not result.accepted:
            code = result.code or ErrorCode.INTERNAL
            await self._send_error(writer, SpeechLMError(result.message, code=code), "synthesize",
                                   {"request_id": request.id})
            return

        stream = _AudioStream(self, writer, request, chunk, received_at, message.emit_tokens)
        finished = False
        try:
            while True:
                event = await events.get()
                if event.kind == EventKind.TOKEN:
                    await stream.add(event.token)
                elif event.kind == EventKind.COMPLETED:
                    finished = True
                    await stream.finish(event)
                    return
                elif event.kind == EventKind.FAILED:
                    finished = True
                    await self._write_failure(writer, request, event)
                    return
        finally:
            if not finished:
                # Client went away or the server is stopping.
                self.loop.cancel(request.id)

    async def _write_failure(self, writer: asyncio.StreamWriter, request: Request,
                             event: EngineEvent) -> None:
        error = event.snapshot.error if event.snapshot is not None else None
        if not error:
            error = {"code": ErrorCode.INTERNAL.value, "message": "server is shutting down"}
        details = dict(error.get("details") or {})
        details["request_id"] = request.id
        await self._write_error(writer, ErrorDetails(
            code=error["code"], message=error["message"], operation="synthesize", details=details,
        ))

    # -- adapters and metrics ---------------------------------------------

    async def handle_load_adapter(self, message: LoadAdapterRequest) -> Dict[str, Any]:
        if message.path is not None:
            adapter = await asyncio.to_thread(self.registry.load_path, message.path)
        else:
            try:
                blob = base64.b64decode(message.blob, validate=True)
            except (binascii.Error, ValueError):
                raise BadRequestError("blob is not valid base64") from None
            adapter = self.registry.load_blob(blob)
        return {
            "name": adapter.name,
            "kind": adapter.kind.value,
            "rank": adapter.rank,
            "epoch": self.registry.epoch,
        }

    def handle_unload_adapter(self, message: UnloadAdapterRequest) -> Dict[str, Any]:
        adapter = self.registry.unload(message.name)
        return {"name": adapter.name, "epoch": self.registry.epoch}

    def handle_list_adapters(self) -> Dict[str, Any]:
        return {"adapters": self.registry.describe(), "epoch": self.registry.epoch}

    def handle_metrics(self) -> Dict[str, Any]:
        status = self.loop.get_status()
        engine = status["engine"]
        return self.metrics.snapshot(
            cache_stats=engine.get("cache"),
            extra={
                "engine": {
                    "queued": engine.get("queued", 0),
                    "decoding": engine.get("decoding", 0),
                    "steps": engine.get("steps", 0),
                    "policy": engine.get("policy"),
                },
                "adapters": len(self.registry),
                "errors": self.error_handler.get_error_statistics(),
            },
        )


class _AudioStream:
    """Chunks generated codec tokens into audio frames for one request."""

    def __init__(self, server: SynthesisServer, writer: asyncio.StreamWriter, request: Request,
                 chunk_tokens: int, received_at: float, emit_tokens: bool):
        self.server = server
        self.writer = writer
        self.request = request
        self.chunk_tokens = chunk_tokens
        self.received_at = received_at
        self.emit_tokens = emit_tokens
        self.token_ids: List[int] = []
        self.stray_ids: List[int] = []
        self.pending: List[int] = []
        self.audio_frames = 0
        self.first_packet_ms: Optional[float] = None

    async def add(self, token_id: int) -> None:
        self.token_ids.append(token_id)
        if not self.server.layout.is_codec(token_id):
            self.stray_ids.append(token_id)
            return
        self.pending.append(token_id)
        if self.request.stream and len(self.pending) >= self.chunk_tokens:
            await self._flush()

    async def finish(self, event: EngineEvent) -> None:
        if self.pending or not self.request.stream:
            await self._flush()
        snapshot = event.snapshot
        codec_tokens = [self.server.layout.codec_index(t) for t in self.token_ids
                        if self.server.layout.is_codec(t)]
        timings = snapshot.timings() if snapshot is not None else {}
        timings["first_packet_ms"] = self.first_packet_ms
        await write_frame(self.writer, Frame.done({
            "request_id": self.request.id,
            "tokens": list(self.token_ids),
            "codec_tokens": codec_tokens,
            "token_count": len(self.token_ids),
            "audio_frames": self.audio_frames,
            "terminated": bool(snapshot.terminated) if snapshot is not None else False,
            "preemptions": snapshot.preemptions if snapshot is not None else 0,
            "stray_ids": list(self.stray_ids),
            "adapters": list(self.request.adapters),
            "timings": timings,
        }), self.server.max_frame)

    async def _flush(self) -> None:
        layout = self.server.layout
        chunk, self.pending = self.pending, []
        pcm = tokens_to_pcm(self.server.codec, [layout.codec_index(t) for t in chunk])
        if self.emit_tokens:
            await write_frame(self.writer, Frame.tokens(chunk), self.server.max_frame)
        if self.first_packet_ms is None:
            self.first_packet_ms = (time.perf_counter() - self.received_at) * 1000.0
            self.server.metrics.record_first_packet(self.first_packet_ms)
        await write_frame(self.writer, Frame.audio(pcm), self.server.max_frame)
        self.audio_frames += 1
