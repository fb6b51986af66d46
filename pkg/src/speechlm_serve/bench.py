"""
Latency and throughput benchmark over the wire protocol.

Drives either an external server (``host``/``port``) or an in-process one
bound to an ephemeral port. ``concurrency`` workers each hold one connection
and take requests from a shared queue. First-packet latency is measured on the
client, from sending the request to receiving the first audio frame.
"""

import asyncio
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .config import ServeConfig
from .errors import IncompleteFrameError, InvalidArgumentError
from .server.client import RemoteError, SpeechLMClient
from .server.metrics import LatencyHistogram
from .server.server import SynthesisServer

logger = logging.getLogger(__name__)

DEFAULT_LATENCY_BUDGET_MS = 300.0
PERCENTILES = (50, 95, 99)

CONNECTION_ERRORS = (OSError, ConnectionError, IncompleteFrameError, asyncio.TimeoutError)


@dataclass(frozen=True)
class BenchPlan:
    concurrency: int = 4
    requests: int = 50
    phones_min: int = 20
    phones_max: int = 20
    max_new_tokens: int = 64
    latency_budget_ms: float = DEFAULT_LATENCY_BUDGET_MS
    prompt: str = "neutral"
    seed: int = 0

    def __post_init__(self):
        if self.concurrency < 1:
            raise InvalidArgumentError(f"concurrency must be >= 1, got {self.concurrency}")
        if self.requests < 1:
            raise InvalidArgumentError(f"requests must be >= 1, got {self.requests}")
        if not 1 <= self.phones_min <= self.phones_max:
            raise InvalidArgumentError(
                f"need 1 <= phones_min <= phones_max, got {self.phones_min}..{self.phones_max}"
            )
        if self.latency_budget_ms <= 0:
            raise InvalidArgumentError("latency budget must be positive")

    def workload(self, phoneme_start: int, phoneme_count: int) -> List[List[int]]:
        """Deterministic phoneme id lists, one per request."""
        rng = np.random.default_rng(self.seed)
        lengths = rng.integers(self.phones_min, self.phones_max + 1, size=self.requests)
        return [
            [int(p) for p in rng.integers(phoneme_start, phoneme_start + phoneme_count, size=n)]
            for n in lengths
        ]


@dataclass
class BenchResult:
    plan: BenchPlan
    first_packet_ms: List[float] = field(default_factory=list)
    tokens: int = 0
    completed: int = 0
    preemptions: int = 0
    connection_failures: int = 0
    errors_by_code: Dict[str, int] = field(default_factory=dict)
    wall_seconds: float = 0.0
    outputs: Dict[int, Tuple[int, ...]] = field(default_factory=dict)

    def percentiles(self) -> Dict[str, Optional[float]]:
        if not self.first_packet_ms:
            return {f"p{p}": None for p in PERCENTILES}
        values = np.percentile(np.asarray(self.first_packet_ms), PERCENTILES)
        return {f"p{p}": float(v) for p, v in zip(PERCENTILES, values)}

    def histogram(self) -> LatencyHistogram:
        histogram = LatencyHistogram()
        for value in self.first_packet_ms:
            histogram.observe(value)
        return histogram

    @property
    def tokens_per_second(self) -> float:
        return self.tokens / self.wall_seconds if self.wall_seconds > 0 else 0.0

    @property
    def failures(self) -> int:
        return self.connection_failures + sum(self.errors_by_code.values())

    @property
    def passed(self) -> bool:
        p95 = self.percentiles()["p95"]
        return (self.failures == 0 and self.completed == self.plan.requests
                and p95 is not None and p95 < self.plan.latency_budget_ms)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "requests": self.plan.requests,
            "concurrency": self.plan.concurrency,
            "completed": self.completed,
            "first_packet_ms": self.percentiles(),
            "histogram": self.histogram().to_dict(),
            "tokens": self.tokens,
            "tokens_per_second": self.tokens_per_second,
            "preemptions": self.preemptions,
            "connection_failures": self.connection_failures,
            "errors_by_code": dict(self.errors_by_code),
            "wall_seconds": self.wall_seconds,
            "latency_budget_ms": self.plan.latency_budget_ms,
            "passed": self.passed,
        }

    def summary(self) -> str:
        p = self.percentiles()

        def fmt(value):
            return "-" if value is None else f"{value:.1f}"

        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"{verdict}: {self.completed}/{self.plan.requests} requests, "
            f"first packet p50 {fmt(p['p50'])} ms, p95 {fmt(p['p95'])} ms, p99 {fmt(p['p99'])} ms "
            f"(budget {self.plan.latency_budget_ms:.0f} ms), {self.tokens_per_second:.1f} tokens/s, "
            f"{self.preemptions} preemptions, {self.failures} failures"
        )


async def _worker(host: str, port: int, max_frame: int, plan: BenchPlan,
                  queue: "asyncio.Queue[Tuple[int, List[int]]]", result: BenchResult) -> None:
    client: Optional[SpeechLMClient] = None
    try:
        while True:
            try:
                index, phones = queue.get_nowait()
            except asyncio.QueueEmpty:
                return
            try:
                if client is None:
                    client = await SpeechLMClient(host, port, max_frame).connect()
                reply = await client.synthesize(
                    phones, prompt=plan.prompt,
                    decode={"mode": "greedy", "max_new_tokens": plan.max_new_tokens},
                    request_id=f"bench-{index}",
                )
            except RemoteError as e:
                code = e.remote_code or e.code.value
                result.errors_by_code[code] = result.errors_by_code.get(code, 0) + 1
                logger.warning(f"Request {index} failed: {code}: {e.message}")
                continue
            except CONNECTION_ERRORS as e:
                result.connection_failures += 1
                logger.warning(f"Request {index} lost its connection: {e!r}")
                if client is not None:
                    await client.close()
                client = None
                continue
            if reply.first_audio_ms is not None:
                result.first_packet_ms.append(reply.first_audio_ms)
            result.completed += 1
            result.tokens += int(reply.done.get("token_count", 0))
            result.preemptions += int(reply.done.get("preemptions", 0))
            result.outputs[index] = tuple(reply.tokens)
    finally:
        if client is not None:
            await client.close()


async def run_bench(plan: BenchPlan, config: ServeConfig, host: Optional[str] = None,
                    port: Optional[int] = None) -> BenchResult:
    """Run the benchmark; starts an in-process server unless ``host`` is given."""
    layout = config.vocab_layout()
    workload = plan.workload(layout.phoneme_start, config.vocab.phoneme_count)
    server: Optional[SynthesisServer] = None
    if host is None:
        local = config.model_copy(update={"server": config.server.model_copy(update={"port": 0})})
        server = SynthesisServer(local)
        await server.start()
        host, port = local.server.host, server.port
    elif port is None:
        port = config.server.port

    logger.info(f"Benchmarking {host}:{port} with {plan.requests} requests at concurrency {plan.concurrency}")
    queue: "asyncio.Queue[Tuple[int, List[int]]]" = asyncio.Queue()
    for item in enumerate(workload):
        queue.put_nowait(item)
    result = BenchResult(plan)
    started = time.perf_counter()
    try:
        await asyncio.gather(*(
            _worker(host, port, config.server.max_frame, plan, queue, result)
            for _ in range(plan.concurrency)
        ))
    finally:
        result.wall_seconds = time.perf_counter() - started
        if server is not None:
            await server.stop()
    logger.info(result.summary())
    return result
