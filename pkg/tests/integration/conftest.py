"""
Integration test fixtures for speechlm-serve.

Provides a connected client for the shared running server and a helper that
decodes a request on its own, outside the engine, for comparison.
"""

import pytest

from speechlm_serve.codeclm import DecodeParams, decode
from speechlm_serve.server.client import SpeechLMClient
from speechlm_serve.tokenspace import PhonemeSeq, compose_inference_prefix


@pytest.fixture
async def client(running_server):
    """Client connected to ``running_server``."""
    async with SpeechLMClient("127.0.0.1", running_server.port, timeout=30.0) as connected:
        yield connected


@pytest.fixture
def solo_decode(no_stop_params, registry, model_config, layout, condition):
    """Token ids a request produces when decoded alone with a contiguous cache."""

    def run(phones, max_new_tokens, adapters=()):
        prefix = compose_inference_prefix(model_config.condition_len, PhonemeSeq.of(layout, phones))
        result = decode(no_stop_params, registry.resolve(adapters), prefix, condition,
                        DecodeParams.greedy(max_new_tokens))
        return list(result.generated)

    return run
