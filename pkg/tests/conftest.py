"""
Global pytest configuration and fixtures for speechlm-serve tests.

This module provides a small model configuration shared by every suite, the
parameters and adapters built from it, a paged cache and engine, and a
running synthesis server on an ephemeral port.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict

import numpy as np
import pytest

from speechlm_serve.codeclm import DecodeParams, init_params, random_adapter
from speechlm_serve.config import TestingConfig
from speechlm_serve.kvcache import PagedKVCache
from speechlm_serve.scheduler import Engine, Request
from speechlm_serve.server.registry import AdapterRegistry
from speechlm_serve.server.server import SynthesisServer
from speechlm_serve.tokenspace import E, PhonemeSeq, compose_inference_prefix
from speechlm_serve.toycodec import preset_audio, prompt_embed

# Small enough that a full decode takes milliseconds.
SMALL_CONFIG: Dict[str, Any] = {
    "model": {
        "d_model": 32,
        "n_layers": 2,
        "n_heads": 2,
        "ffn_dim": 64,
        "max_positions": 128,
        "condition_len": 4,
    },
    "vocab": {"phoneme_count": 16, "codec_count": 64},
    "codec": {"sample_rate": 8000, "frame_len": 256, "embed_dim": 16},
    "cache": {"pages": 64, "page_size": 4},
    "scheduler": {
        "max_batch": 4,
        "queue_capacity": 16,
        "default_max_new_tokens": 24,
        "max_new_tokens_limit": 64,
    },
    "server": {"port": 0, "max_phones": 32, "chunk_tokens": 4, "drain_timeout": 5.0},
}


def make_no_stop(params):
    """Push the E logit far below every codec logit so decodes run to their cap.

    A constant feature in the first hidden dimension survives the tiny random
    layers, and E's output row points the other way.
    """
    params.pos_emb[:, 0] += np.float32(1.0)
    params.tok_emb[E, 0] = np.float32(-10.0)
    return params


@pytest.fixture
def serve_config():
    """Small testing configuration (port 0, tiny model)."""
    return TestingConfig(**SMALL_CONFIG)


@pytest.fixture
def config_file(tmp_path, serve_config) -> Path:
    """The small configuration written as a JSON file."""
    path = tmp_path / "serve.json"
    path.write_text(serve_config.model_dump_json(), encoding="utf-8")
    return path


@pytest.fixture
def model_config(serve_config):
    return serve_config.lm_config()


@pytest.fixture
def layout(serve_config):
    return serve_config.vocab_layout()


@pytest.fixture
def codec_spec(serve_config):
    return serve_config.codec_spec()


@pytest.fixture
def params(model_config):
    """Randomly initialised parameters of the small model."""
    return init_params(model_config)


@pytest.fixture
def no_stop():
    """The no-stop transform, for tests that build their own parameters."""
    return make_no_stop


@pytest.fixture
def no_stop_params(model_config):
    """Parameters whose greedy and top-k decodes never pick E."""
    return make_no_stop(init_params(model_config))


@pytest.fixture
def condition(serve_config, codec_spec):
    """Condition embeddings of the neutral preset prompt."""
    return prompt_embed(codec_spec, preset_audio(codec_spec, "neutral"),
                        serve_config.model.condition_len, seed=serve_config.model.seed)


@pytest.fixture
def phones(layout):
    return PhonemeSeq.of(layout, [layout.phoneme_start + i for i in (3, 1, 4, 1, 5, 9)])


@pytest.fixture
def prefix(model_config, phones):
    return compose_inference_prefix(model_config.condition_len, phones)


@pytest.fixture
def domain_adapter(model_config):
    return random_adapter(model_config, "news", "domain", rank=4, alpha=8.0, seed=11)


@pytest.fixture
def speaker_adapter(model_config):
    return random_adapter(model_config, "alice", "speaker", rank=2, alpha=4.0, seed=12)


@pytest.fixture
def registry(model_config, domain_adapter, speaker_adapter):
    """Registry holding one domain and one speaker adapter."""
    registry = AdapterRegistry(model_config)
    registry.load(domain_adapter)
    registry.load(speaker_adapter)
    return registry


@pytest.fixture
def paged_cache(serve_config):
    return PagedKVCache(serve_config.page_config())


@pytest.fixture
def engine(no_stop_params, paged_cache, registry):
    """Engine over the no-stop parameters and the shared registry."""
    return Engine(no_stop_params, paged_cache, registry, max_batch=4, queue_capacity=16)


@pytest.fixture
def make_request(model_config, layout, condition):
    """Factory for engine requests over distinct phoneme sequences."""

    def factory(phone_indices=(1, 2, 3), max_new_tokens=12, adapters=(), request_id=None,
                decode_params=None):
        seq = PhonemeSeq.of(layout, [layout.phoneme_start + i for i in phone_indices])
        kwargs = {"id": request_id} if request_id else {}
        return Request(
            compose_inference_prefix(model_config.condition_len, seq),
            condition,
            decode_params or DecodeParams.greedy(max_new_tokens),
            tuple(adapters),
            **kwargs,
        )

    return factory


@pytest.fixture
async def running_server(serve_config, no_stop_params, registry):
    """A started synthesis server on an ephemeral port."""
    server = SynthesisServer(serve_config, params=no_stop_params, registry=registry)
    await server.start()
    try:
        yield server
    finally:
        await server.stop(timeout=5.0)


@pytest.fixture
def restore_logging():
    """Put back the root logger handlers replaced by ``configure_logging``."""
    root = logging.getLogger()
    events = logging.getLogger("speechlm_serve.events")
    saved = (root.handlers[:], root.level, events.handlers[:], events.level, events.propagate)
    yield
    for handler in root.handlers + events.handlers:
        if handler not in saved[0] and handler not in saved[2]:
            handler.close()
    root.handlers[:] = saved[0]
    root.setLevel(saved[1])
    events.handlers[:] = saved[2]
    events.setLevel(saved[3])
    events.propagate = saved[4]


@pytest.fixture
def isolated_env(tmp_path, monkeypatch):
    """Run in an empty directory with no TAKIN_* variables set."""
    for key in list(os.environ):
        if key.startswith("TAKIN_"):
            monkeypatch.delenv(key)
    monkeypatch.chdir(tmp_path)
    return tmp_path
