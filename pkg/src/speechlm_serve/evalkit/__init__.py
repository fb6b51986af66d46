"""Evaluation metrics and preference-data construction."""

from .badcase import (
    BCR_UTTERANCES,
    BadCaseConfig,
    BadCaseFlags,
    BadCaseReport,
    bad_rate,
    bcr,
    build_report,
    detect_bad_cases,
    has_repetition_loop,
)
from .io import apply_human_ranks, read_human_ranks, read_jsonl, write_json, write_jsonl
from .pairs import OverlapReport, build_preference_pairs, overlap, overlap_report
from .per import CorpusPer, PerReport, corpus_per, edit_distance, per
from .pipeline import SamplingPlan, codec_round_trip, sample_and_rate
from .report import SummaryRow, summary_table
from .similarity import SimilarityReport, load_similarity_pairs, similarity_report

__all__ = [
    "BCR_UTTERANCES",
    "BadCaseConfig",
    "BadCaseFlags",
    "BadCaseReport",
    "CorpusPer",
    "OverlapReport",
    "PerReport",
    "SamplingPlan",
    "SimilarityReport",
    "SummaryRow",
    "apply_human_ranks",
    "bad_rate",
    "bcr",
    "build_preference_pairs",
    "build_report",
    "codec_round_trip",
    "corpus_per",
    "detect_bad_cases",
    "edit_distance",
    "has_repetition_loop",
    "load_similarity_pairs",
    "overlap",
    "overlap_report",
    "per",
    "read_human_ranks",
    "read_jsonl",
    "sample_and_rate",
    "similarity_report",
    "summary_table",
    "write_json",
    "write_jsonl",
]
