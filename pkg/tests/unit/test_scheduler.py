"""
Unit tests for the continuous-batching engine, its request records and
preemption policies.
"""

import json
import logging

import numpy as np
import pytest

from speechlm_serve.codeclm import DecodeParams, decode, random_adapter
from speechlm_serve.errors import ErrorCode, InvalidArgumentError, UnknownSequenceError
from speechlm_serve.kvcache import PageConfig, PagedKVCache
from speechlm_serve.scheduler import (
    AdmissionResult,
    Engine,
    EngineEvent,
    EventKind,
    PreemptPolicy,
    RequestPhase,
    RequestState,
    StepKind,
    get_policy,
    oldest_first,
    youngest_first,
)
from speechlm_serve.tokenspace import CodecSeq, PhonemeSeq, compose_training_sequence


class FakeClock:
    def __init__(self):
        self.now = 100.0

    def __call__(self):
        self.now += 0.5
        return self.now


def small_engine(params, registry, model_config, num_pages, **kwargs):
    cache = PagedKVCache(PageConfig(model_config.kv_payload_shape, page_size=4, num_pages=num_pages))
    return Engine(params, cache, registry, **kwargs)


def reference(params, registry, request):
    adapters = registry.resolve(request.adapters) if request.adapters else []
    return decode(params, adapters, request.prefix, request.condition_embeddings,
                  request.decode_params).generated


def six_phones(start):
    return tuple(range(start, start + 6))


class TestAdmission:
    """Tests for request admission and rejection."""

    def test_accepts_and_runs(self, engine, make_request, no_stop_params, registry):
        """An admitted request decodes to the same tokens as a solo decode."""
        request = make_request(max_new_tokens=10)
        assert engine.admit(request).accepted
        events = engine.run_until_idle()
        tokens = [e.token for e in events if e.kind == EventKind.TOKEN]
        assert tuple(tokens) == reference(no_stop_params, registry, request)
        assert events[-1].kind == EventKind.COMPLETED
        snapshot = engine.snapshot(request.id)
        assert snapshot.phase == RequestPhase.COMPLETE
        assert len(snapshot.generated) == 10 and not snapshot.terminated
        assert not engine.has_work

    def test_unknown_adapter(self, engine, make_request):
        """Names missing from the registry are rejected."""
        result = engine.admit(make_request(adapters=("nobody",)))
        assert not result.accepted
        assert result.code == ErrorCode.UNKNOWN_ADAPTER
        assert engine.stats["rejected"] == 1

    def test_two_adapters_of_one_kind(self, engine, make_request, registry, model_config):
        """At most one adapter per kind."""
        registry.load(random_adapter(model_config, "sports", "domain", rank=2, seed=5))
        result = engine.admit(make_request(adapters=("news", "sports")))
        assert result.code == ErrorCode.INVALID_ARGUMENT

    def test_duplicate_id(self, engine, make_request):
        """A request id can only be admitted once."""
        assert engine.admit(make_request(request_id="same")).accepted
        result = engine.admit(make_request(request_id="same"))
        assert not result.accepted and "duplicate" in result.message

    def test_prefix_must_end_at_s(self, engine, make_request, layout, model_config):
        """A full training sequence is not a valid prefix."""
        request = make_request()
        request.prefix = compose_training_sequence(
            model_config.condition_len, PhonemeSeq.of(layout, [layout.phoneme_start]), CodecSeq())
        assert engine.admit(request).code == ErrorCode.INVALID_ARGUMENT

    def test_condition_shape(self, engine, make_request):
        """Condition embeddings must have the model's shape."""
        request = make_request()
        request.condition_embeddings = np.zeros((1, 1), np.float32)
        assert engine.admit(request).code == ErrorCode.INVALID_ARGUMENT

    def test_queue_full(self, no_stop_params, paged_cache, registry, make_request):
        """Admission beyond queue capacity is rejected with queue-full."""
        engine = Engine(no_stop_params, paged_cache, registry, queue_capacity=2)
        assert engine.admit(make_request()).accepted
        assert engine.admit(make_request()).accepted
        result = engine.admit(make_request())
        assert result.code == ErrorCode.QUEUE_FULL
        assert result.to_dict()["code"] == "queue-full"

    def test_admission_result_dict(self):
        """Accepted results carry no code."""
        assert AdmissionResult("r1", True).to_dict() == {"request_id": "r1", "accepted": True}


class TestPlanning:
    """Tests for prefill and decode planning."""

    def test_prefill_wins_over_decode(self, engine, make_request):
        """A fitting queued request is prefilled before decoding resumes."""
        first = make_request(request_id="a")
        engine.admit(first)
        engine.step()
        engine.admit(make_request(request_id="b"))
        plan = engine.plan_step()
        assert plan.kind == StepKind.PREFILL and plan.members == ("b",)

    def test_decode_batch_capped_and_ordered(self, no_stop_params, paged_cache, registry, make_request):
        """Decode batches hold at most max_batch rows in arrival order."""
        engine = Engine(no_stop_params, paged_cache, registry, max_batch=2)
        for name in ("a", "b", "c"):
            engine.admit(make_request(request_id=name, adapters=("news",) if name == "b" else ()))
        for _ in range(3):
            assert engine.step()[0].kind == EventKind.TOKEN
        plan = engine.plan_step()
        assert plan.kind == StepKind.DECODE
        assert plan.members == ("a", "b")
        assert plan.adapter_stacks == ((), ("news",))
        assert len(plan) == 2

    def test_idle_plan(self, engine):
        """Nothing to do plans nothing."""
        assert engine.plan_step() is None
        assert engine.step() == []

    def test_zero_budget_completes_at_prefill(self, engine, make_request):
        """max_new_tokens=0 completes without generating."""
        request = make_request(max_new_tokens=0)
        engine.admit(request)
        events = engine.run_until_idle()
        assert [e.kind for e in events] == [EventKind.COMPLETED]
        assert engine.snapshot(request.id).generated == ()


class TestBatchInvariance:
    """Batched decoding gives every request its solo output."""

    def test_mixed_adapters_greedy(self, engine, make_request, no_stop_params, registry):
        """Rows with different adapter stacks decode as if alone."""
        stacks = [(), ("news",), ("alice",), ("alice", "news")]
        requests = [make_request(phone_indices=six_phones(i), max_new_tokens=14, adapters=s)
                    for i, s in enumerate(stacks)]
        for request in requests:
            assert engine.admit(request).accepted
        engine.run_until_idle()
        for request in requests:
            assert engine.snapshot(request.id).generated == reference(no_stop_params, registry, request)

    @pytest.mark.slow
    @pytest.mark.property
    @pytest.mark.parametrize("num_pages", [12, 64])
    @pytest.mark.parametrize("max_batch", [1, 2, 4, 8])
    @pytest.mark.parametrize("trial", range(20))
    def test_random_arrivals_match_solo(self, no_stop_params, registry, model_config, make_request,
                                        trial, max_batch, num_pages):
        """Random staggered arrivals, any batch size and page pressure leave outputs unchanged."""
        rng = np.random.default_rng(1000 * trial + 10 * max_batch + num_pages)
        stacks = [(), ("news",), ("alice",), ("alice", "news")]
        requests = []
        for i in range(8):
            length = int(rng.integers(3, 9))
            phone_indices = tuple(int(p) for p in rng.integers(0, 16, length))
            requests.append(make_request(phone_indices=phone_indices,
                                         max_new_tokens=int(rng.integers(4, 17)),
                                         adapters=stacks[int(rng.integers(len(stacks)))],
                                         request_id=f"t{trial}-{i}"))
        expected = {r.id: reference(no_stop_params, registry, r) for r in requests}

        engine = small_engine(no_stop_params, registry, model_config, num_pages=num_pages,
                              max_batch=max_batch)
        for index in rng.permutation(len(requests)):
            assert engine.admit(requests[int(index)]).accepted
            for _ in range(int(rng.integers(0, 4))):
                engine.step()
        engine.run_until_idle()

        for request in requests:
            snapshot = engine.snapshot(request.id)
            assert snapshot.phase == RequestPhase.COMPLETE
            assert snapshot.generated == expected[request.id]
        assert engine.cache.pages_free == num_pages
        assert engine.cache.stats().eviction_count == engine.stats["preemptions"]

    def test_adapters_pinned_at_admission(self, engine, make_request, no_stop_params, registry,
                                          domain_adapter):
        """Unloading an adapter does not affect requests already admitted."""
        request = make_request(phone_indices=six_phones(2), max_new_tokens=14, adapters=("news",))
        expected = decode(no_stop_params, [domain_adapter], request.prefix,
                          request.condition_embeddings, request.decode_params).generated
        engine.admit(request)
        engine.step()
        registry.unload("news")
        engine.run_until_idle()
        assert engine.snapshot(request.id).generated == expected
        assert not engine.admit(make_request(adapters=("news",))).accepted


class TestPreemption:
    """Tests for page-pressure eviction and recompute."""

    def test_preempted_requests_match_solo(self, no_stop_params, registry, model_config, make_request):
        """Evicted and resumed requests produce their uninterrupted tokens."""
        engine = small_engine(no_stop_params, registry, model_config, num_pages=12)
        requests = [make_request(phone_indices=six_phones(i), max_new_tokens=16,
                                 adapters=("news",) if i == 1 else ())
                    for i in range(3)]
        for request in requests:
            engine.admit(request)
        events = engine.run_until_idle()
        assert engine.stats["preemptions"] >= 1
        assert any(e.kind == EventKind.PREEMPTED for e in events)
        for request in requests:
            snapshot = engine.snapshot(request.id)
            assert snapshot.phase == RequestPhase.COMPLETE
            assert snapshot.generated == reference(no_stop_params, registry, request)
        assert sum(engine.snapshot(r.id).preemptions for r in requests) == engine.stats["preemptions"]
        assert engine.cache.stats().eviction_count == engine.stats["preemptions"]
        assert engine.cache.pages_free == 12

    def test_sampled_preemption_matches_solo(self, no_stop_params, registry, model_config, make_request):
        """Seeded sampling survives preemption unchanged."""
        engine = small_engine(no_stop_params, registry, model_config, num_pages=12)
        requests = [
            make_request(phone_indices=six_phones(i),
                         decode_params=DecodeParams.sampled(rng_seed=40 + i, top_k=8, max_new_tokens=16))
            for i in range(3)
        ]
        for request in requests:
            engine.admit(request)
        engine.run_until_idle()
        assert engine.stats["preemptions"] >= 1
        for request in requests:
            assert engine.snapshot(request.id).generated == reference(no_stop_params, registry, request)

    def test_oldest_first_policy(self, no_stop_params, registry, model_config, make_request):
        """The oldest-first policy evicts the earliest arrival."""
        engine = small_engine(no_stop_params, registry, model_config, num_pages=12,
                              preempt_policy="oldest_first")
        requests = [make_request(phone_indices=six_phones(i), max_new_tokens=16) for i in range(3)]
        for request in requests:
            engine.admit(request)
        events = engine.run_until_idle()
        preempted = [e.request_id for e in events if e.kind == EventKind.PREEMPTED]
        assert preempted[0] == requests[0].id
        for request in requests:
            assert engine.snapshot(request.id).generated == reference(no_stop_params, registry, request)

    def test_never_fits(self, no_stop_params, registry, model_config, make_request):
        """A prefix larger than the whole pool fails with resource-exhausted."""
        engine = small_engine(no_stop_params, registry, model_config, num_pages=2)
        request = make_request(phone_indices=six_phones(0))
        engine.admit(request)
        events = engine.run_until_idle()
        assert [e.kind for e in events] == [EventKind.FAILED]
        assert engine.snapshot(request.id).error["code"] == "resource-exhausted"

    def test_sole_request_outgrows_pool(self, no_stop_params, registry, model_config, make_request):
        """A lone request that cannot grow fails instead of evicting itself."""
        engine = small_engine(no_stop_params, registry, model_config, num_pages=4)
        request = make_request(phone_indices=six_phones(0), max_new_tokens=16)
        engine.admit(request)
        events = engine.run_until_idle()
        assert events[-1].kind == EventKind.FAILED
        snapshot = engine.snapshot(request.id)
        assert snapshot.error["code"] == "resource-exhausted"
        assert len(snapshot.generated) == 4
        assert engine.cache.pages_free == 4


class TestCancellation:
    """Tests for cancelling in-flight requests."""

    def test_cancel_in_flight(self, engine, make_request):
        """Cancelling frees the request's pages and reports a failure."""
        request = make_request()
        engine.admit(request)
        engine.step()
        assert engine.cancel(request.id)
        events = engine.step()
        assert events[0].kind == EventKind.FAILED
        assert events[0].snapshot.error["code"] == "cancelled"
        assert engine.cache.pages_free == engine.cache.config.num_pages
        assert not engine.cancel(request.id)

    def test_unknown_snapshot(self, engine):
        """Unknown request ids raise."""
        with pytest.raises(UnknownSequenceError):
            engine.snapshot("missing")


class TestRecords:
    """Tests for request state, snapshots, events and status."""

    def test_illegal_transition(self, make_request):
        """Queued requests cannot jump straight to decode."""
        state = RequestState(make_request(), [], 0, 0.0)
        with pytest.raises(InvalidArgumentError, match="illegal transition"):
            state.transition(RequestPhase.DECODE)
        state.transition(RequestPhase.PREFILL)
        state.transition(RequestPhase.DECODE)
        state.transition(RequestPhase.QUEUED)

    def test_timings_use_clock(self, no_stop_params, paged_cache, registry, make_request):
        """Snapshots carry arrival, first-token and completion times."""
        engine = Engine(no_stop_params, paged_cache, registry, clock=FakeClock())
        request = make_request(max_new_tokens=2)
        engine.admit(request)
        engine.run_until_idle()
        timings = engine.snapshot(request.id).timings()
        assert timings["arrival"] < timings["first_token"] < timings["completion"]
        assert timings["first_token_ms"] == pytest.approx((timings["first_token"] - timings["arrival"]) * 1000)

    def test_event_log_entries(self, engine, make_request):
        """Token events log the token; completion logs the totals."""
        request = make_request(max_new_tokens=1)
        engine.admit(request)
        token_event, done_event = engine.run_until_idle()
        assert token_event.to_log() == {"request_id": request.id, "event": "token",
                                        "token": token_event.token}
        assert done_event.to_log() == {"request_id": request.id, "event": "completed",
                                       "tokens": 1, "preemptions": 0}

    def test_events_logged_as_json(self, engine, make_request, caplog):
        """Lifecycle events go to the events logger as JSON lines."""
        with caplog.at_level(logging.INFO, logger="speechlm_serve.events"):
            engine.admit(make_request(max_new_tokens=1))
            engine.run_until_idle()
        entries = [json.loads(r.getMessage()) for r in caplog.records if r.name == "speechlm_serve.events"]
        assert [e["event"] for e in entries] == ["admitted", "completed"]

    def test_status(self, engine, make_request):
        """Status combines counters, queue depth and cache stats."""
        engine.admit(make_request(max_new_tokens=3))
        engine.run_until_idle()
        status = engine.status()
        assert status["completed"] == 1 and status["tokens_generated"] == 3
        assert status["policy"] == "youngest_first"
        assert status["queued"] == 0 and status["decoding"] == 0
        assert status["cache"]["pages_used"] == 0

    def test_event_defaults(self):
        """Events without a snapshot log only their identity."""
        assert EngineEvent(EventKind.PREEMPTED, "r").to_log() == {"request_id": "r", "event": "preempted"}


class TestPolicies:
    """Tests for victim selection."""

    def _states(self, make_request):
        return [RequestState(make_request(), [], order, arrival)
                for order, arrival in ((0, 1.0), (1, 3.0), (2, 3.0), (3, 2.0))]

    def test_youngest_first(self, make_request):
        """Latest arrival wins; admission order breaks ties."""
        states = self._states(make_request)
        assert youngest_first(states) is states[2]

    def test_oldest_first(self, make_request):
        """Earliest arrival is evicted."""
        states = self._states(make_request)
        assert oldest_first(states) is states[0]

    def test_lookup(self):
        """Policies are looked up by name."""
        assert get_policy("youngest_first") is youngest_first
        assert get_policy(PreemptPolicy.OLDEST_FIRST) is oldest_first
        with pytest.raises(InvalidArgumentError, match="unknown preempt policy"):
            get_policy("random")
