"""
Unit tests for the codec language model: parameters, LoRA, quantization,
sampling and decoding.
"""

import numpy as np
import pytest

from speechlm_serve.codeclm import (
    DecodeParams,
    LoraAdapter,
    ModelConfig,
    decode,
    decode_adapter,
    encode_adapter,
    forward,
    greedy_agreement,
    greedy_step,
    init_params,
    load_adapter,
    merge_dense,
    quantize_weights,
    random_adapter,
    sample_step,
    save_adapter,
    sequence_logprob,
    zero_params,
)
from speechlm_serve.codeclm.decode import new_cache
from speechlm_serve.codeclm.lora import adapter_from_npz, canonical_stack
from speechlm_serve.codeclm.params import LORA_TARGETS, SplitMix64
from speechlm_serve.codeclm.quant import QUANTIZED_LAYER_FIELDS, dequant_matmul, quantize_matrix
from speechlm_serve.codeclm.sampling import candidate_ids, step_rng
from speechlm_serve.errors import (
    BadContainerError,
    CacheInconsistencyError,
    InvalidArgumentError,
    NumericError,
    PositionOverflowError,
)
from speechlm_serve.tokenspace import E, S, CodecSeq, build_vocab, compose_training_sequence


def _logits(params, adapters, condition, ids):
    return forward(params, adapters, condition, ids, new_cache(params))


class TestParameters:
    """Tests for configuration and deterministic initialisation."""

    def test_same_seed_same_weights(self, model_config):
        """Initialisation is a pure function of the config."""
        assert init_params(model_config).checksum() == init_params(model_config).checksum()

    def test_seed_changes_weights(self, model_config):
        """A different seed gives different weights."""
        other = ModelConfig(**{**model_config.__dict__, "seed": 1})
        assert init_params(other).checksum() != init_params(model_config).checksum()

    def test_weights_in_init_range(self, params):
        """Every weight lies in [-0.02, 0.02)."""
        for _, tensor in params.tensors():
            assert tensor.dtype == np.float32
            assert tensor.min() >= -0.02 and tensor.max() <= 0.02

    def test_splitmix_block_matches_sequential(self):
        """Drawing in blocks gives the same stream as drawing one at a time."""
        block = SplitMix64(7).next_u64(5)
        single = SplitMix64(7)
        assert [int(single.next_u64(1)[0]) for _ in range(5)] == [int(v) for v in block]

    def test_heads_must_divide_width(self):
        """d_model must be divisible by n_heads."""
        with pytest.raises(InvalidArgumentError, match="divisible"):
            ModelConfig(build_vocab(4, 4), d_model=10, n_heads=3)

    def test_zero_params_uniform_logits(self, model_config, condition, prefix):
        """All-zero parameters give all-zero logits."""
        logits = _logits(zero_params(model_config), (), condition, prefix.token_ids)
        assert not logits.any()


class TestForward:
    """Tests for the per-position forward pass."""

    def test_incremental_equals_full(self, params, condition, prefix, layout):
        """Extending a cache one token at a time matches a fresh full pass."""
        ids = list(prefix.token_ids) + [layout.codec_start + 3, layout.codec_start + 7]
        cache = new_cache(params)
        forward(params, (), condition, ids[:-2], cache)
        forward(params, (), condition, ids[:-1], cache)
        incremental = forward(params, (), condition, ids, cache)
        full = _logits(params, (), condition, ids)
        np.testing.assert_array_equal(incremental, full)

    def test_position_overflow(self, params, condition, model_config):
        """Sequences longer than max_positions are rejected."""
        ids = [S] * (model_config.max_positions - model_config.condition_len + 1)
        with pytest.raises(PositionOverflowError):
            _logits(params, (), condition, ids)

    def test_nothing_new_in_cache(self, params, condition, prefix):
        """Calling forward again without new tokens is a cache inconsistency."""
        cache = new_cache(params)
        forward(params, (), condition, prefix.token_ids, cache)
        with pytest.raises(CacheInconsistencyError):
            forward(params, (), condition, prefix.token_ids, cache)

    def test_condition_shape_checked(self, params, prefix):
        """Condition embeddings must match (condition_len, prompt_dim)."""
        with pytest.raises(InvalidArgumentError):
            _logits(params, (), np.zeros((2, 2), np.float32), prefix.token_ids)

    def test_logit_bias_applied(self, params, condition, prefix, layout):
        """The bias is added to the final logits."""
        bias = np.zeros(layout.total_size, np.float32)
        bias[E] = 5.0
        plain = _logits(params, (), condition, prefix.token_ids)
        biased = forward(params, (), condition, prefix.token_ids, new_cache(params), bias)
        assert biased[E] == pytest.approx(plain[E] + 5.0)


class TestLora:
    """Tests for adapters, their stacking and the TKLA container."""

    def test_matches_dense_merged_oracle(self, params, condition, prefix, model_config):
        """Adapter logits equal logits of hand-merged dense weights."""
        rng = np.random.default_rng(3)
        for trial in range(20):
            stack = [
                random_adapter(model_config, f"d{trial}", "domain",
                               rank=int(rng.integers(0, 17)), alpha=8.0, seed=2 * trial),
                random_adapter(model_config, f"s{trial}", "speaker",
                               rank=int(rng.integers(0, 17)), alpha=16.0, seed=2 * trial + 1),
            ]
            layers = []
            for index, layer in enumerate(params.layers):
                weights = dict(layer.__dict__)
                for target in LORA_TARGETS:
                    for adapter in stack:
                        delta = adapter.delta(index, target)
                        if delta is not None:
                            weights[f"w{target}"] = weights[f"w{target}"] + delta
                layers.append(type(layer)(**weights))
            oracle = _logits(params.with_layers(layers), (), condition, prefix.token_ids)
            logits = _logits(params, stack, condition, prefix.token_ids)
            np.testing.assert_allclose(logits, oracle, rtol=1e-5, atol=1e-7)

    def test_merge_dense_bit_identical(self, params, condition, prefix, domain_adapter, speaker_adapter):
        """merge_dense folds exactly what forward folds."""
        stack = [domain_adapter, speaker_adapter]
        merged = merge_dense(params, stack)
        np.testing.assert_array_equal(
            _logits(params, stack, condition, prefix.token_ids),
            _logits(merged, (), condition, prefix.token_ids),
        )

    def test_rank_zero_is_noop(self, params, condition, prefix, model_config):
        """A rank-0 adapter leaves the logits unchanged."""
        empty = random_adapter(model_config, "noop", "domain", rank=0)
        assert empty.is_identity
        np.testing.assert_array_equal(
            _logits(params, [empty], condition, prefix.token_ids),
            _logits(params, (), condition, prefix.token_ids),
        )

    def test_stack_order_independent(self, params, condition, prefix, domain_adapter, speaker_adapter):
        """Listing the adapters in either order gives the same logits."""
        np.testing.assert_array_equal(
            _logits(params, [speaker_adapter, domain_adapter], condition, prefix.token_ids),
            _logits(params, [domain_adapter, speaker_adapter], condition, prefix.token_ids),
        )
        assert [a.kind.value for a in canonical_stack([speaker_adapter, domain_adapter])] == [
            "domain", "speaker"]

    def test_adapters_change_output(self, params, condition, prefix, domain_adapter):
        """A non-trivial adapter changes the logits."""
        assert not np.array_equal(
            _logits(params, [domain_adapter], condition, prefix.token_ids),
            _logits(params, (), condition, prefix.token_ids),
        )

    def test_container_round_trip(self, tmp_path, domain_adapter, model_config):
        """Saved adapters load back with the same digest and factors."""
        path = save_adapter(domain_adapter, tmp_path / "news.tkla")
        loaded = load_adapter(path, model_config)
        assert loaded.digest == domain_adapter.digest
        assert loaded.manifest() == domain_adapter.manifest()
        a, b = loaded.factors[(1, "v")]
        np.testing.assert_array_equal(a, domain_adapter.factors[(1, "v")][0])
        np.testing.assert_array_equal(b, domain_adapter.factors[(1, "v")][1])

    @pytest.mark.parametrize("mutate, message", [
        (lambda blob: b"XXXX" + blob[4:], "bad magic"),
        (lambda blob: blob[:4] + (2).to_bytes(4, "little") + blob[8:], "version"),
        (lambda blob: blob[:-4], "truncated"),
        (lambda blob: blob + b"\0\0\0\0", "trailing"),
        (lambda blob: blob[:6], "shorter than its header"),
    ])
    def test_corrupt_containers(self, domain_adapter, mutate, message):
        """Damaged containers raise BadContainerError."""
        with pytest.raises(BadContainerError, match=message):
            decode_adapter(mutate(encode_adapter(domain_adapter)))

    def test_shape_mismatch_against_model(self, domain_adapter):
        """A container built for another width does not fit the model."""
        other = ModelConfig(build_vocab(16, 64), d_model=16, n_layers=2, n_heads=2,
                            condition_len=4, max_positions=128, prompt_dim=16)
        with pytest.raises(BadContainerError, match="do not match model"):
            decode_adapter(encode_adapter(domain_adapter), other)

    def test_from_npz(self, tmp_path, domain_adapter):
        """Factors in an .npz archive pack into an adapter."""
        arrays = {}
        for (layer, target), (a, b) in domain_adapter.factors.items():
            arrays[f"layers.{layer}.{target}.A"] = a
            arrays[f"layers.{layer}.{target}.B"] = b
        np.savez(tmp_path / "factors.npz", **arrays)
        adapter = adapter_from_npz(tmp_path / "factors.npz", "news", "domain", alpha=8.0)
        assert adapter.digest == domain_adapter.digest

    def test_empty_name_rejected(self):
        """Adapters need a name."""
        with pytest.raises(InvalidArgumentError):
            LoraAdapter(name="", kind="domain")


class TestQuantization:
    """Tests for int8 per-channel weight quantization."""

    def test_reconstruction_bound(self, params):
        """Every element is reconstructed within half a quantization step."""
        qparams = quantize_weights(params)
        originals = {"tok_emb": params.tok_emb}
        for index, layer in enumerate(params.layers):
            for name in QUANTIZED_LAYER_FIELDS:
                originals[f"layers.{index}.{name}"] = getattr(layer, name)
        for name, matrix in qparams.matrices():
            error = np.abs(matrix.dequantize(np.float64) - originals[name].astype(np.float64))
            assert np.all(error <= matrix.scale[:, None] / 2 + 1e-12), name

    def test_on_grid_row_is_exact(self):
        """Weights already on the int8 grid quantize to their grid index and back."""
        k = np.arange(-127, 128, dtype=np.float64)
        rows = np.stack([k * (0.127 / 127), -k * (0.254 / 127)])
        q = quantize_matrix(rows)
        assert q.values[0].tolist() == k.astype(int).tolist()
        assert q.values[1].tolist() == (-k).astype(int).tolist()
        np.testing.assert_allclose(q.dequantize(np.float64), rows, rtol=0, atol=1e-15)

    def test_dequant_matmul_matches_reference(self):
        """dequant_matmul equals x @ W_dequant.T for vectors and batches."""
        rng = np.random.default_rng(3)
        q = quantize_matrix(rng.standard_normal((5, 8)).astype(np.float32))
        reference = (q.values.astype(np.float64) * q.scale[:, None]).T
        x = rng.standard_normal(8).astype(np.float32)
        batch = rng.standard_normal((3, 8)).astype(np.float32)
        assert dequant_matmul(q, x).shape == (5,)
        np.testing.assert_allclose(dequant_matmul(q, x), x @ reference, rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(dequant_matmul(q, batch), batch @ reference, rtol=1e-5, atol=1e-6)

    def test_quantized_forward_matches_dequantized(self, params, condition, prefix):
        """The int8 path computes the float forward over the dequantized weights."""
        qparams = quantize_weights(params)
        np.testing.assert_array_equal(_logits(qparams, (), condition, prefix.token_ids),
                                      _logits(qparams.dequantized(), (), condition, prefix.token_ids))

    def test_zero_row_scale(self):
        """An all-zero row gets scale 1 and stays zero."""
        q = quantize_matrix(np.zeros((2, 3), np.float32))
        assert q.scale.tolist() == [1.0, 1.0]
        assert not q.values.any()

    def test_non_finite_rejected(self):
        """NaN weights cannot be quantized."""
        with pytest.raises(NumericError):
            quantize_matrix(np.array([[np.nan, 1.0]]))

    def test_greedy_agreement(self, params):
        """Quantized and float paths mostly choose the same greedy token."""
        report = greedy_agreement(params, quantize_weights(params), contexts=200, seed=0)
        assert report.contexts == 200
        assert report.rate >= 0.95

    def test_quantized_decode_runs(self, params, condition, prefix):
        """Decoding accepts quantized parameters."""
        result = decode(quantize_weights(params), (), prefix, condition, DecodeParams.greedy(5))
        assert len(result.generated) <= 5


class TestSampling:
    """Tests for greedy and sampled token selection."""

    def test_greedy_ties_go_low(self):
        """Ties resolve to the lowest id."""
        assert greedy_step(np.array([1.0, 3.0, 3.0, 0.0])) == 1

    def test_greedy_respects_allowed(self):
        """Only allowed ids are candidates."""
        assert greedy_step(np.array([9.0, 1.0, 2.0]), np.array([1, 2])) == 2

    def test_greedy_matches_exhaustive_scan(self):
        """Greedy picks what a first-maximum scan over the candidates picks."""
        rng = np.random.default_rng(17)
        for _ in range(200):
            size = int(rng.integers(1, 40))
            # Coarse integer logits make ties common.
            logits = rng.integers(-3, 4, size).astype(np.float32)
            allowed = np.flatnonzero(rng.random(size) < 0.6)
            if allowed.size == 0:
                allowed = np.array([size - 1])
            for candidates in (None, allowed):
                ids = range(size) if candidates is None else candidates.tolist()
                best = None
                for i in ids:
                    if best is None or logits[i] > logits[best]:
                        best = i
                assert greedy_step(logits, candidates) == best

    @pytest.mark.slow
    def test_sampled_frequencies_match_softmax(self):
        """Over 10^5 draws each top-k frequency is within 3 sigma of its softmax probability."""
        draws = 100_000
        logits = np.random.default_rng(5).standard_normal(12)
        params = DecodeParams.sampled(rng_seed=0, temperature=0.8, top_k=4)
        top = np.argsort(-logits, kind="stable")[:4]
        weights = np.exp((logits[top] - logits[top].max()) / 0.8)
        probs = weights / weights.sum()

        rng = np.random.default_rng(2024)
        counts = np.bincount([sample_step(logits, params, rng=rng) for _ in range(draws)],
                             minlength=logits.size)
        assert counts.sum() == draws
        assert counts[np.setdiff1d(np.arange(logits.size), top)].sum() == 0
        sigma = np.sqrt(draws * probs * (1 - probs))
        assert np.all(np.abs(counts[top] - draws * probs) <= 3 * sigma)

    def test_non_finite_logits(self):
        """NaN logits are a numeric error."""
        with pytest.raises(NumericError):
            greedy_step(np.array([0.0, np.nan]))

    def test_top_k_one_is_greedy(self):
        """Sampling with top_k=1 returns the argmax."""
        logits = np.array([0.1, 2.0, 1.5])
        params = DecodeParams.sampled(rng_seed=5, top_k=1)
        assert sample_step(logits, params) == 1

    def test_top_k_too_large(self):
        """top_k larger than the vocabulary is invalid."""
        with pytest.raises(InvalidArgumentError):
            sample_step(np.zeros(3), DecodeParams.sampled(rng_seed=0, top_k=4))

    def test_seeded_draws_repeat(self):
        """The same (seed, step) gives the same draw."""
        logits = np.linspace(0.0, 1.0, 30)
        params = DecodeParams.sampled(rng_seed=9, top_k=30)
        draws = [sample_step(logits, params, step=s) for s in range(20)]
        assert draws == [sample_step(logits, params, step=s) for s in range(20)]
        assert step_rng(9, 3).random() == step_rng(9, 3).random()

    def test_sampled_stays_in_top_k(self):
        """Draws only come from the k best candidates."""
        logits = np.arange(10, dtype=np.float64)
        params = DecodeParams.sampled(rng_seed=1, top_k=3)
        assert {sample_step(logits, params, step=s) for s in range(50)} <= {7, 8, 9}

    def test_invalid_decode_params(self):
        """Temperature and generation caps are checked."""
        with pytest.raises(InvalidArgumentError):
            DecodeParams.sampled(rng_seed=0, temperature=0.0)
        with pytest.raises(InvalidArgumentError):
            DecodeParams.greedy(max_new_tokens=5000)

    def test_candidates_are_end_and_codec(self):
        """Codec-only candidates are E followed by the codec range."""
        layout = build_vocab(3, 4)
        assert candidate_ids(layout).tolist() == [E, 8, 9, 10, 11]
        assert candidate_ids(layout, codec_only=False) is None


class TestDecode:
    """Tests for autoregressive decoding and scoring."""

    def test_greedy_is_deterministic(self, params, condition, prefix):
        """Two greedy decodes agree."""
        first = decode(params, (), prefix, condition, DecodeParams.greedy(10))
        second = decode(params, (), prefix, condition, DecodeParams.greedy(10))
        assert first == second

    def test_runs_to_cap_without_end(self, no_stop_params, condition, prefix, layout):
        """Without E the decode stops at max_new_tokens, unterminated."""
        result = decode(no_stop_params, (), prefix, condition, DecodeParams.greedy(7))
        assert len(result.codec_ids) == 7
        assert not result.terminated
        assert all(layout.is_codec(t) for t in result.codec_ids)

    def test_end_bias_terminates(self, params, condition, prefix, layout):
        """A large E bias ends the decode at once."""
        bias = np.zeros(layout.total_size, np.float32)
        bias[E] = 1e3
        result = decode(params, (), prefix, condition, DecodeParams.greedy(10), logit_bias=bias)
        assert result.terminated
        assert result.generated == ()

    def test_zero_budget(self, params, condition, prefix):
        """max_new_tokens=0 returns an empty, unterminated result."""
        result = decode(params, (), prefix, condition, DecodeParams.greedy(0))
        assert result.generated == () and not result.terminated

    def test_stray_ids_recorded(self, params, condition, prefix, layout):
        """Unrestricted decoding keeps non-codec ids as strays."""
        bias = np.zeros(layout.total_size, np.float32)
        bias[layout.phoneme_start] = 1e3
        params_unrestricted = DecodeParams(max_new_tokens=3, codec_only=False)
        result = decode(params, (), prefix, condition, params_unrestricted, logit_bias=bias)
        assert result.stray_ids == (layout.phoneme_start,) * 3
        assert result.codec_ids == ()

    def test_prefix_must_end_at_s(self, params, condition, phones, model_config):
        """Decoding needs a prefix ending at S."""
        training = compose_training_sequence(model_config.condition_len, phones, CodecSeq())
        with pytest.raises(InvalidArgumentError):
            decode(params, (), training, condition, DecodeParams.greedy(3))

    def test_sequence_logprob(self, params, condition, phones, layout, model_config):
        """The quality proxy is a finite mean log-probability."""
        codec = CodecSeq.of(layout, [layout.codec_start, layout.codec_start + 1])
        seq = compose_training_sequence(model_config.condition_len, phones, codec)
        score = sequence_logprob(params, seq, condition)
        assert np.isfinite(score) and score < 0
