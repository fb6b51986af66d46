"""
Unit tests for the evaluation toolkit: PER, bad cases, preference pairs,
overlap, record files, similarity and the sampling pipeline.
"""

import random

import numpy as np
import pytest

from fixtures.eval_data import (
    EXPECTED_OBJECTIVE_PAIRS,
    EXPECTED_SUBJECTIVE_PAIRS,
    FLAGGED_UTTERANCE,
    bcr_corpus,
    human_rank_csv,
    overlap_pair_sets,
    rated_samples,
)
from speechlm_serve.errors import InvalidArgumentError, SchemaError
from speechlm_serve.evalkit import (
    BadCaseConfig,
    BadCaseReport,
    SamplingPlan,
    SummaryRow,
    apply_human_ranks,
    bad_rate,
    bcr,
    build_preference_pairs,
    build_report,
    codec_round_trip,
    corpus_per,
    detect_bad_cases,
    edit_distance,
    has_repetition_loop,
    load_similarity_pairs,
    overlap,
    overlap_report,
    per,
    read_human_ranks,
    read_jsonl,
    sample_and_rate,
    similarity_report,
    summary_table,
    write_jsonl as write_records,
)
from speechlm_serve.models import (
    HumanRank,
    PerRecord,
    PreferencePair,
    RatedSample,
    RatingSource,
    SentenceRecord,
    SimilarityRecord,
    UtteranceRecord,
)
from speechlm_serve.toycodec import PromptAudio, preset_audio, write_wav


def naive_distance(a, b):
    rows = [list(range(len(b) + 1))]
    for i, x in enumerate(a, 1):
        row = [i]
        for j, y in enumerate(b, 1):
            row.append(min(rows[-1][j] + 1, row[j - 1] + 1, rows[-1][j - 1] + (x != y)))
        rows.append(row)
    return rows[-1][-1]


def pairs_of(rows):
    return [PreferencePair(**row) for row in rows]


class TestPer:
    """Tests for the token error rate."""

    @pytest.mark.parametrize("reference, hypothesis, counts", [
        ([1, 2, 3], [1, 2, 3], (0, 0, 0)),
        ([1, 2, 3], [1, 5, 3], (1, 0, 0)),
        ([1, 2], [1, 2, 3], (0, 1, 0)),
        ([1, 2, 3], [1, 3], (0, 0, 1)),
        ([1, 2], [], (0, 0, 2)),
    ])
    def test_counts(self, reference, hypothesis, counts):
        """Substitutions, insertions and deletions are counted."""
        report = per(reference, hypothesis)
        assert (report.substitutions, report.insertions, report.deletions) == counts
        assert report.rate == pytest.approx(sum(counts) / len(reference))

    def test_empty_reference(self):
        """A reference with no tokens has no rate."""
        with pytest.raises(InvalidArgumentError):
            per([], [1])

    def test_rate_can_exceed_one(self):
        """Insertions push the rate past 1."""
        assert per([1], [2, 3, 4]).rate == pytest.approx(3.0)

    @pytest.mark.property
    def test_matches_naive_dynamic_programming(self):
        """Vectorised distances and alignments agree with a plain DP."""
        rng = random.Random(0)
        for _ in range(1000):
            a = [rng.randrange(4) for _ in range(rng.randrange(0, 12))]
            b = [rng.randrange(4) for _ in range(rng.randrange(0, 12))]
            expected = naive_distance(a, b)
            assert edit_distance(a, b) == expected
            if a:
                assert per(a, b).edits == expected

    def test_corpus(self):
        """Corpus rate pools edits; the mean averages per-utterance rates."""
        corpus = corpus_per([per([1, 2], [1, 3]), per([1, 2, 3, 4], [1, 2, 3, 4])])
        assert corpus.rate == pytest.approx(1 / 6)
        assert corpus.mean_rate == pytest.approx(0.25)
        assert corpus.to_dict()["utterances"] == 2
        with pytest.raises(InvalidArgumentError):
            corpus_per([])


class TestBadCases:
    """Tests for the bad-case detectors and rates."""

    @pytest.mark.parametrize("tokens, expected", [
        ([1, 2, 3, 4] * 4, True),
        ([7] * 16, True),
        ([9, 8] + [1, 2, 3, 4] * 4 + [5], True),
        ([1, 2, 3, 4] * 3 + [1, 2, 3], False),
        ([1, 2, 3, 4] * 3 + [1, 2, 3, 9], False),
        ([7] * 15, False),
        (list(range(40)), False),
        ([], False),
    ])
    def test_repetition_loop(self, tokens, expected):
        """A 4-gram repeated 4 times back to back is a loop."""
        assert has_repetition_loop(tokens) is expected

    @pytest.mark.parametrize("length, anomalous", [(20, False), (26, False), (27, True),
                                                   (14, False), (13, True), (0, True)])
    def test_length_anomaly(self, length, anomalous):
        """Lengths more than 30% off 4 frames per phoneme are flagged."""
        flags = detect_bad_cases(list(range(length)), True, expected_phone_count=5)
        assert flags.length_anomaly is anomalous
        assert flags.is_bad is anomalous

    def test_no_termination(self):
        """Hitting the cap without E is a bad case."""
        flags = detect_bad_cases(list(range(20)), False, 5)
        assert flags.no_termination and flags.is_bad

    @pytest.mark.parametrize("kwargs", [{"frames_per_phone": 0}, {"length_tolerance": -0.1},
                                        {"repeat_ngram": 0}, {"repeat_count": 1}])
    def test_invalid_config(self, kwargs):
        """Detector thresholds are range checked."""
        with pytest.raises(InvalidArgumentError):
            BadCaseConfig(**kwargs)

    def test_bcr_over_hundred(self):
        """One flagged utterance in 100 is a BCR of 0.01."""
        report = build_report(UtteranceRecord(**row) for row in bcr_corpus())
        assert report.bad_count == 1
        assert bcr(report) == pytest.approx(0.01)
        data = report.to_dict()
        assert data["bcr"] == pytest.approx(0.01)
        assert data["categories"] == {"length_anomaly": 0, "repetition_loop": 0, "no_termination": 1}
        assert list(data["flagged"]) == [FLAGGED_UTTERANCE]

    def test_bcr_needs_exactly_hundred(self):
        """Other corpus sizes use bad_rate instead."""
        report = build_report(UtteranceRecord(**row) for row in bcr_corpus(50))
        with pytest.raises(InvalidArgumentError, match="bad_rate"):
            bcr(report)
        assert bad_rate(report) == pytest.approx(0.02)
        assert "bcr" not in report.to_dict()

    def test_empty_and_duplicate(self):
        """Empty reports have no rate; utterance ids are unique."""
        report = BadCaseReport()
        assert report.to_dict()["bad_rate"] is None
        with pytest.raises(InvalidArgumentError):
            bad_rate(report)
        report.add("u1", detect_bad_cases([], True, 1))
        with pytest.raises(InvalidArgumentError, match="duplicate"):
            report.add("u1", detect_bad_cases([], True, 1))


class TestPreferencePairs:
    """Tests for chosen/rejected selection."""

    def test_objective(self):
        """Lowest PER wins, quality breaks ties, full ties give no pair."""
        samples = [RatedSample(**row) for row in rated_samples()]
        pairs = build_preference_pairs(samples, RatingSource.OBJECTIVE)
        assert {p.sentence_id: p.key for p in pairs} == EXPECTED_OBJECTIVE_PAIRS
        assert all(p.source == RatingSource.OBJECTIVE for p in pairs)

    def test_subjective(self):
        """Best and worst human rank form the pair."""
        samples = [RatedSample(**row) for row in rated_samples(with_ranks=True)]
        pairs = build_preference_pairs(samples, "subjective")
        assert {p.sentence_id: p.key for p in pairs} == EXPECTED_SUBJECTIVE_PAIRS

    def test_input_order_irrelevant(self):
        """Shuffled input gives the same pairs in sentence order."""
        samples = [RatedSample(**row) for row in rated_samples()]
        shuffled = samples[:]
        random.Random(3).shuffle(shuffled)
        assert build_preference_pairs(shuffled) == build_preference_pairs(samples)
        assert [p.sentence_id for p in build_preference_pairs(shuffled)] == ["s1", "s3"]

    @pytest.mark.property
    def test_matches_brute_force(self):
        """Selection agrees with filtering best and worst candidates step by step."""
        rng = random.Random(7)
        for trial in range(300):
            n = rng.randrange(2, 6)
            samples = [
                RatedSample(sentence_id="s", sample_index=i, per_rate=rng.choice([0.0, 0.1, 0.2]),
                            quality_proxy=rng.choice([-1.0, -2.0]))
                for i in range(n)
            ]
            lowest = min(s.per_rate for s in samples)
            best = [s for s in samples if s.per_rate == lowest]
            best = [s for s in best if s.quality_proxy == max(b.quality_proxy for b in best)][0]
            highest = max(s.per_rate for s in samples)
            worst = [s for s in samples if s.per_rate == highest]
            worst = [s for s in worst if s.quality_proxy == min(w.quality_proxy for w in worst)][0]
            pairs = build_preference_pairs(samples)
            if (best.per_rate, best.quality_proxy) == (worst.per_rate, worst.quality_proxy):
                assert pairs == [], f"trial {trial}"
            else:
                assert [p.key for p in pairs] == [(best.sample_index, worst.sample_index)], f"trial {trial}"

    def test_errors(self):
        """Too few samples, duplicates and missing ratings are rejected."""
        one = [RatedSample(sentence_id="s", sample_index=0, per_rate=0.0, quality_proxy=-1.0)]
        with pytest.raises(InvalidArgumentError, match="at least 2"):
            build_preference_pairs(one)
        with pytest.raises(InvalidArgumentError, match="duplicate"):
            build_preference_pairs(one + one)
        unrated = [RatedSample(sentence_id="s", sample_index=i) for i in range(2)]
        with pytest.raises(InvalidArgumentError, match="missing"):
            build_preference_pairs(unrated)
        with pytest.raises(InvalidArgumentError, match="human_rank"):
            build_preference_pairs(unrated, RatingSource.SUBJECTIVE)


class TestOverlap:
    """Tests for agreement between pair sets."""

    def test_fixture_overlap(self):
        """64 agreeing sentences out of 100 is 0.64."""
        objective, subjective = overlap_pair_sets()
        report = overlap_report(pairs_of(objective), pairs_of(subjective))
        assert report.fraction == pytest.approx(0.64)
        assert (report.sentences, report.agreeing, report.only_a, report.only_b) == (100, 64, 6, 0)
        assert report.to_dict()["overlap"] == pytest.approx(0.64)

    def test_universe_denominator(self):
        """An explicit universe sets the denominator."""
        objective, subjective = overlap_pair_sets()
        universe = [f"s{i:03d}" for i in range(200)]
        assert overlap(pairs_of(objective), pairs_of(subjective), universe) == pytest.approx(0.32)

    def test_universe_must_cover_pairs(self):
        """Pairs outside the universe are an error."""
        objective, _ = overlap_pair_sets()
        with pytest.raises(InvalidArgumentError, match="outside the universe"):
            overlap(pairs_of(objective), [], ["s000"])

    def test_errors(self):
        """Empty universes and repeated sentences are rejected."""
        with pytest.raises(InvalidArgumentError, match="non-empty"):
            overlap([], [])
        pair = PreferencePair(sentence_id="s", chosen=0, rejected=1, source="objective")
        with pytest.raises(InvalidArgumentError, match="two pairs"):
            overlap([pair, pair], [])


class TestRecordFiles:
    """Tests for JSON lines and rank CSV handling."""

    def test_read_skips_blank_lines(self, tmp_path):
        """Blank lines are ignored."""
        path = tmp_path / "per.jsonl"
        path.write_text('{"utterance_id": "a", "reference": [1], "hypothesis": []}\n\n', encoding="utf-8")
        assert read_jsonl(path, PerRecord) == [PerRecord(utterance_id="a", reference=[1], hypothesis=[])]

    @pytest.mark.parametrize("second_line, message", [
        ("{oops", "invalid JSON"),
        ("[1, 2]", "JSON object"),
        ('{"utterance_id": "b", "reference": [], "hypothesis": []}', "reference"),
        ('{"utterance_id": "b", "reference": [1], "hypothesis": [], "x": 1}', "x"),
    ])
    def test_schema_errors_name_the_line(self, tmp_path, second_line, message):
        """The first bad line is reported with its number."""
        path = tmp_path / "per.jsonl"
        path.write_text('{"utterance_id": "a", "reference": [1], "hypothesis": [1]}\n'
                        + second_line + "\n", encoding="utf-8")
        with pytest.raises(SchemaError, match=message) as exc_info:
            read_jsonl(path, PerRecord)
        assert exc_info.value.line == 2
        assert exc_info.value.details == {"path": str(path), "line": 2}

    def test_missing_file(self, tmp_path):
        """Unreadable files are invalid arguments."""
        with pytest.raises(InvalidArgumentError, match="cannot read"):
            read_jsonl(tmp_path / "missing.jsonl", PerRecord)

    def test_write_then_read(self, tmp_path):
        """Written records read back equal, without null fields."""
        samples = [RatedSample(**row) for row in rated_samples()]
        path = write_records(tmp_path / "out" / "samples.jsonl", samples)
        assert "human_rank" not in path.read_text(encoding="utf-8")
        assert read_jsonl(path, RatedSample) == samples

    def test_human_ranks(self, tmp_path):
        """Rank CSV rows fill in human_rank."""
        path = tmp_path / "ranks.csv"
        path.write_text(human_rank_csv() + ",,\n", encoding="utf-8")
        ranks = read_human_ranks(path)
        assert len(ranks) == 9
        samples = apply_human_ranks([RatedSample(**row) for row in rated_samples()], ranks)
        assert [s.human_rank for s in samples] == [1, 3, 2, 2, 1, 3, 1, 2, 3]

    def test_rank_csv_errors(self, tmp_path):
        """Missing columns and bad values are schema errors."""
        path = tmp_path / "ranks.csv"
        path.write_text("sentence_id,rank\ns1,1\n", encoding="utf-8")
        with pytest.raises(SchemaError, match="sample_index"):
            read_human_ranks(path)
        path.write_text("sentence_id,sample_index,rank\ns1,0,1\ns1,1,zero\n", encoding="utf-8")
        with pytest.raises(SchemaError) as exc_info:
            read_human_ranks(path)
        assert exc_info.value.line == 3

    def test_apply_rank_errors(self):
        """Ranks must name known samples once."""
        samples = [RatedSample(**row) for row in rated_samples()]
        unknown = [HumanRank(sentence_id="s9", sample_index=0, rank=1)]
        with pytest.raises(InvalidArgumentError, match="unknown"):
            apply_human_ranks(samples, unknown)
        repeated = [HumanRank(sentence_id="s1", sample_index=0, rank=1)] * 2
        with pytest.raises(InvalidArgumentError, match="duplicate"):
            apply_human_ranks(samples, repeated)


class TestSummaryTable:
    """Tests for the text summary."""

    def test_cells(self):
        """PER in percent, bad rate as a percentage, SIM to three places."""
        table = summary_table([SummaryRow("base", per=0.0123, bad_rate=0.01, sim=0.9),
                               SummaryRow("lora")])
        lines = table.splitlines()
        assert table.endswith("\n")
        assert [c.strip() for c in lines[0].split(" | ")] == ["system", "PER", "bad rate", "SIM"]
        assert set(lines[1]) <= {"-", "+"}
        assert [c.strip() for c in lines[2].split(" | ")] == ["base", "1.23", "1.0%", "0.900"]
        assert [c.strip() for c in lines[3].split(" | ")] == ["lora", "-", "-", "-"]


class TestSimilarity:
    """Tests for speaker similarity reports."""

    def test_same_and_different(self, codec_spec):
        """Identical audio scores 1; another preset scores lower."""
        neutral = preset_audio(codec_spec, "neutral")
        bright = preset_audio(codec_spec, "bright")
        report = similarity_report([("same", neutral, neutral), ("other", neutral, bright)],
                                   codec_spec, condition_len=4)
        assert report.scores["same"] == pytest.approx(1.0)
        assert report.scores["other"] < 1.0
        data = report.to_dict()
        assert data["utterances"] == 2
        assert list(data["scores"]) == ["other", "same"]
        assert data["min"] == pytest.approx(report.scores["other"])

    def test_errors(self, codec_spec):
        """Empty input, duplicate ids and wrong sample rates are rejected."""
        neutral = preset_audio(codec_spec, "neutral")
        with pytest.raises(InvalidArgumentError):
            similarity_report([], codec_spec)
        with pytest.raises(InvalidArgumentError, match="duplicate"):
            similarity_report([("a", neutral, neutral)] * 2, codec_spec)
        resampled = PromptAudio(neutral.samples, codec_spec.sample_rate * 2)
        with pytest.raises(InvalidArgumentError, match="sample rate"):
            similarity_report([("a", neutral, resampled)], codec_spec)

    def test_load_pairs_resolves_relative_paths(self, tmp_path, codec_spec):
        """Relative WAV paths resolve against the base directory."""
        audio = preset_audio(codec_spec, "deep")
        write_wav(tmp_path / "ref.wav", audio.samples, audio.sample_rate)
        write_wav(tmp_path / "hyp.wav", audio.samples, audio.sample_rate)
        records = [SimilarityRecord(utterance_id="u1", reference_wav="ref.wav", hypothesis_wav="hyp.wav")]
        (utterance_id, reference, hypothesis), = load_similarity_pairs(records, tmp_path)
        assert utterance_id == "u1"
        np.testing.assert_array_equal(reference.samples, hypothesis.samples)


class TestSamplingPipeline:
    """Tests for repeated sampling with objective ratings."""

    def sentences(self, layout):
        return [SentenceRecord(sentence_id=f"s{i}", phones=[layout.phoneme_start + i, layout.phoneme_start + 2])
                for i in range(2)]

    def test_plan_validation(self):
        """At least two samples and a non-negative base seed."""
        with pytest.raises(InvalidArgumentError):
            SamplingPlan(samples=1)
        with pytest.raises(InvalidArgumentError):
            SamplingPlan(base_seed=-1)
        assert SamplingPlan(base_seed=10).sample_params(3).rng_seed == 13

    def test_codec_round_trip(self, layout, codec_spec):
        """Rendering and recovering codec ids is lossless."""
        ids = [layout.codec_id(i) for i in (0, 5, 63, 5)]
        assert codec_round_trip(codec_spec, layout, ids) == ids

    def test_rates_every_sample(self, no_stop_params, condition, codec_spec, layout):
        """Each sentence yields one rated sample per plan entry."""
        plan = SamplingPlan(samples=3, base_seed=4, top_k=8, max_new_tokens=8)
        rated = sample_and_rate(no_stop_params, self.sentences(layout), condition, codec_spec, plan)
        assert [(s.sentence_id, s.sample_index) for s in rated] == [
            ("s0", 0), ("s0", 1), ("s0", 2), ("s1", 0), ("s1", 1), ("s1", 2)]
        for sample in rated:
            assert len(sample.tokens) == 8
            assert sample.terminated is False
            assert sample.per_rate >= 0.0
            assert np.isfinite(sample.quality_proxy) and sample.quality_proxy < 0.0
        again = sample_and_rate(no_stop_params, self.sentences(layout), condition, codec_spec, plan)
        assert again == rated

    def test_top_one_matches_reference(self, no_stop_params, condition, codec_spec, layout):
        """Sampling with top_k 1 reproduces the greedy reference exactly."""
        plan = SamplingPlan(samples=2, top_k=1, max_new_tokens=6)
        rated = sample_and_rate(no_stop_params, self.sentences(layout)[:1], condition, codec_spec, plan)
        assert [s.per_rate for s in rated] == [0.0, 0.0]
        assert rated[0].tokens == rated[1].tokens

    def test_feeds_pair_builder(self, no_stop_params, condition, codec_spec, layout):
        """Rated samples carry everything objective pairs need."""
        plan = SamplingPlan(samples=3, top_k=8, max_new_tokens=8)
        rated = sample_and_rate(no_stop_params, self.sentences(layout), condition, codec_spec, plan)
        for pair in build_preference_pairs(rated):
            assert pair.chosen != pair.rejected
