"""Command-line entry point: serve, synth, bench, eval and adapter tooling."""

import argparse
import asyncio
import json
import logging
import signal
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError as PydanticValidationError

from . import __version__
from .bench import DEFAULT_LATENCY_BUDGET_MS, BenchPlan, run_bench
from .codeclm import (
    AdapterKind,
    DecodeMode,
    decode,
    init_params,
    load_adapter,
    quantize_weights,
    random_adapter,
    save_adapter,
)
from .codeclm.lora import adapter_from_npz
from .config import ServeConfig, load_config
from .errors import InvalidArgumentError, SchemaError, SpeechLMError
from .evalkit import (
    BadCaseConfig,
    SamplingPlan,
    SummaryRow,
    apply_human_ranks,
    bad_rate,
    bcr,
    build_preference_pairs,
    build_report,
    corpus_per,
    load_similarity_pairs,
    overlap_report,
    per,
    read_human_ranks,
    read_jsonl,
    sample_and_rate,
    similarity_report,
    summary_table,
    write_json,
    write_jsonl,
)
from .evalkit.badcase import BCR_UTTERANCES
from .models.eval_models import (
    PerRecord,
    PreferencePair,
    RatedSample,
    RatingSource,
    SentenceRecord,
    SimilarityRecord,
    UtteranceRecord,
)
from .parameter_validator import ParameterValidator
from .server.engine_loop import safe_log
from .server.registry import AdapterRegistry
from .server.server import SynthesisServer
from .services.error_handler import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, ErrorHandler
from .tokenspace import compose_inference_prefix, read_phones_file
from .toycodec import (
    PRESET_TOKENS,
    pcm_to_tokens,
    preset_audio,
    prompt_embed,
    read_wav,
    tokens_to_pcm,
    write_wav,
)

logger = logging.getLogger(__name__)
event_logger = logging.getLogger("speechlm_serve.events")

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class CommandError(SpeechLMError):
    """A command ran but its result is a failure (exit code 2)."""


def configure_logging(config: ServeConfig, debug: bool = False) -> None:
    """Configure logging based on configuration settings."""
    root_logger = logging.getLogger()
    root_logger.setLevel(logging.DEBUG if debug else config.log_level.value)
    root_logger.handlers.clear()
    formatter = logging.Formatter(LOG_FORMAT)

    if config.log_file_path:
        try:
            config.log_file_path.parent.mkdir(parents=True, exist_ok=True)
            file_handler = logging.FileHandler(config.log_file_path)
            file_handler.setFormatter(formatter)
            root_logger.addHandler(file_handler)
            logger.info(f"Logging to file: {config.log_file_path}")
        except Exception as e:
            console_handler = logging.StreamHandler()
            console_handler.setFormatter(formatter)
            root_logger.addHandler(console_handler)
            logger.warning(f"Failed to setup file logging: {e}")
    else:
        console_handler = logging.StreamHandler()
        console_handler.setFormatter(formatter)
        root_logger.addHandler(console_handler)

    event_logger.handlers.clear()
    event_logger.propagate = True
    if config.event_log_path:
        try:
            config.event_log_path.parent.mkdir(parents=True, exist_ok=True)
            events_handler = logging.FileHandler(config.event_log_path)
            events_handler.setFormatter(logging.Formatter("%(message)s"))
            event_logger.addHandler(events_handler)
            event_logger.setLevel(logging.DEBUG)
            event_logger.propagate = False
        except Exception as e:
            logger.warning(f"Failed to setup event log: {e}")


class ServerManager:
    """Manages the synthesis server lifecycle."""

    def __init__(self, config: ServeConfig):
        self.config = config
        self.server: Optional[SynthesisServer] = None
        self.running = False
        self._stop_event: Optional[asyncio.Event] = None
        self._loop: Optional[asyncio.AbstractEventLoop] = None

    def _setup_signal_handlers(self) -> None:
        """Setup graceful shutdown signal handlers."""
        def signal_handler(signum, frame):
            safe_log(logging.INFO, f"Received signal {signum}, draining in-flight requests...")
            self.stop()

        for signum in (signal.SIGINT, signal.SIGTERM):
            try:
                self._loop.add_signal_handler(signum, signal_handler, signum, None)
            except (NotImplementedError, RuntimeError):
                signal.signal(signum, signal_handler)

    def stop(self) -> None:
        if self._loop is not None and self._stop_event is not None:
            self._loop.call_soon_threadsafe(self._stop_event.set)

    def startup_line(self) -> str:
        return json.dumps({
            "event": "startup",
            "version": __version__,
            "host": self.config.server.host,
            "port": self.server.port if self.server else self.config.server.port,
            "config_checksum": self.config.config_checksum(),
        }, sort_keys=True)

    async def run(self) -> None:
        self._loop = asyncio.get_running_loop()
        self._stop_event = asyncio.Event()
        self._setup_signal_handlers()
        for issue in self.config.validate_environment():
            logger.warning(issue)

        self.server = SynthesisServer(self.config)
        await self.server.start()
        self.running = True
        logger.info(self.startup_line())
        try:
            await self._stop_event.wait()
        finally:
            logger.info("Stopping server...")
            await self.server.stop()
            self.running = False


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_decode_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mode", choices=[m.value for m in DecodeMode], default="greedy",
                        help="Decoding mode (default: greedy)")
    parser.add_argument("--temperature", type=float, default=1.0, help="Sampling temperature")
    parser.add_argument("--top-k", type=int, default=50, help="Candidates kept before sampling")
    parser.add_argument("--seed", type=int, default=0, help="Sampling seed")
    parser.add_argument("--max-new-tokens", type=int, default=None,
                        help="Generation cap (default: scheduler.default_max_new_tokens)")
    parser.add_argument("--allow-stray", action="store_true",
                        help="Do not restrict candidates to codec tokens and E")


def _add_prompt_options(parser: argparse.ArgumentParser) -> None:
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--prompt", type=Path, help="Prompt WAV (mono 16-bit PCM)")
    group.add_argument("--preset", choices=sorted(PRESET_TOKENS), default="neutral",
                       help="Built-in prompt (default: neutral)")


def create_parser() -> argparse.ArgumentParser:
    """Create command line argument parser."""
    parser = _Parser(
        prog="speechlm-serve",
        description="Codec-token speech LM inference engine, streaming server and evaluation tools",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s serve --config serve.json          # Start the synthesis server
  %(prog)s synth utt.phones --out out.wav     # Offline synthesis with a self-check
  %(prog)s bench --concurrency 4 --requests 50
  %(prog)s eval bcr --input utterances.jsonl
  %(prog)s adapter pack --name alice --kind speaker --seed 7 --out alice.tkla

Environment:
  TAKIN_CONFIG names the JSON config file; TAKIN_<SECTION>__<FIELD> overrides
  single fields, e.g. TAKIN_CACHE__PAGES=1024.
        """,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", type=Path, help="JSON configuration file")
    parser.add_argument("--env-file", type=Path, help="Path to .env configuration file")
    parser.add_argument("--environment", choices=["development", "production", "testing"],
                        help="Configuration profile")
    parser.add_argument("--log-level", help="Override the configured log level")
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")

    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True

    serve = commands.add_parser("serve", help="Run the synthesis server")
    serve.add_argument("--host", help="Listen address")
    serve.add_argument("--port", type=int, help="Listen port (0 picks a free one)")
    serve.add_argument("--pages", type=int, help="KV cache pages")
    serve.add_argument("--max-batch", type=int, help="Decode batch size")
    serve.add_argument("--preempt-policy", help="youngest_first or oldest_first")

    synth = commands.add_parser("synth", help="Synthesize one utterance to a WAV file")
    synth.add_argument("phones", type=Path, help=".phones file")
    synth.add_argument("--line", type=int, default=1,
                       help="Utterance to synthesize, 1-based among non-comment lines")
    synth.add_argument("--out", type=Path, required=True, help="Output WAV")
    synth.add_argument("--adapter", type=Path, action="append", default=[],
                       help="TKLA adapter file; at most one per kind")
    _add_prompt_options(synth)
    _add_decode_options(synth)

    bench = commands.add_parser("bench", help="Measure first-packet latency and throughput")
    bench.add_argument("--host", help="External server (default: in-process server)")
    bench.add_argument("--port", type=int, help="External server port")
    bench.add_argument("--concurrency", type=int, default=4)
    bench.add_argument("--requests", type=int, default=50)
    bench.add_argument("--phones-min", type=int, default=20)
    bench.add_argument("--phones-max", type=int, default=20)
    bench.add_argument("--max-new-tokens", type=int, default=64)
    bench.add_argument("--latency-budget", type=float, default=DEFAULT_LATENCY_BUDGET_MS,
                       help="p95 first-packet budget in ms (default: 300)")
    bench.add_argument("--seed", type=int, default=0, help="Workload seed")
    bench.add_argument("--json", type=Path, dest="json_out", help="Write the report as JSON")

    evaluate = commands.add_parser("eval", help="Evaluation metrics and preference data")
    evals = evaluate.add_subparsers(dest="eval_command", metavar="metric")
    evals.required = True

    e_per = evals.add_parser("per", help="Token error rate of recovered vs logged tokens")
    e_per.add_argument("--input", type=Path, required=True, help="JSONL of PerRecord")

    e_bcr = evals.add_parser("bcr", help="Bad case rate")
    e_bcr.add_argument("--input", type=Path, required=True, help="JSONL of UtteranceRecord")

    e_pairs = evals.add_parser("pairs", help="Build preference pairs from rated samples")
    e_pairs.add_argument("--input", type=Path, required=True, help="JSONL of RatedSample")
    e_pairs.add_argument("--source", choices=[s.value for s in RatingSource], default="objective")
    e_pairs.add_argument("--ranks", type=Path, help="Human rank CSV (subjective source)")
    e_pairs.add_argument("--pairs-out", type=Path, required=True, help="Output JSONL of pairs")

    e_overlap = evals.add_parser("overlap", help="Agreement between two pair files")
    e_overlap.add_argument("pairs_a", type=Path)
    e_overlap.add_argument("pairs_b", type=Path)
    e_overlap.add_argument("--universe", type=Path,
                           help="JSONL whose sentence_id fields define the sentence set")

    e_sim = evals.add_parser("sim", help="Speaker similarity of audio pairs")
    e_sim.add_argument("--input", type=Path, required=True, help="JSONL of SimilarityRecord")
    e_sim.add_argument("--base-dir", type=Path, help="Directory relative WAV paths resolve against")

    e_sample = evals.add_parser("sample", help="Repeated sampling with objective ratings")
    e_sample.add_argument("--input", type=Path, required=True, help="JSONL of SentenceRecord")
    e_sample.add_argument("--samples", type=int, default=None,
                          help="Samples per sentence (default: eval.samples_per_sentence)")
    e_sample.add_argument("--base-seed", type=int, default=0)
    e_sample.add_argument("--temperature", type=float, default=1.0)
    e_sample.add_argument("--top-k", type=int, default=50)
    e_sample.add_argument("--max-new-tokens", type=int, default=None)
    e_sample.add_argument("--adapter", type=Path, action="append", default=[])
    e_sample.add_argument("--samples-out", type=Path, required=True, help="Output JSONL of RatedSample")
    _add_prompt_options(e_sample)

    for sub in (e_per, e_bcr, e_pairs, e_overlap, e_sim, e_sample):
        sub.add_argument("--out", type=Path, help="Write the JSON report here (default: stdout)")
        sub.add_argument("--summary", type=Path, help="Write the text summary here (default: stdout)")

    adapter = commands.add_parser("adapter", help="TKLA adapter tooling")
    adapters = adapter.add_subparsers(dest="adapter_command", metavar="action")
    adapters.required = True

    pack = adapters.add_parser("pack", help="Build a TKLA container")
    pack.add_argument("--name", required=True)
    pack.add_argument("--kind", choices=[k.value for k in AdapterKind], required=True)
    pack.add_argument("--out", type=Path, required=True)
    pack.add_argument("--alpha", type=float, default=16.0)
    source = pack.add_mutually_exclusive_group(required=True)
    source.add_argument("--npz", type=Path, help="Factors as layers.<i>.<target>.A/B arrays")
    source.add_argument("--seed", type=int, help="Deterministic random factors")
    pack.add_argument("--rank", type=int, default=8, help="Rank of random factors")

    inspect = adapters.add_parser("inspect", help="Print TKLA container metadata")
    inspect.add_argument("path", type=Path)

    return parser


def _flag_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}

    def put(section: str, key: str, value: Any) -> None:
        if value is not None:
            overrides.setdefault(section, {})[key] = value

    if args.command == "serve":
        put("server", "host", args.host)
        put("server", "port", args.port)
        put("cache", "pages", args.pages)
        put("scheduler", "max_batch", args.max_batch)
        put("scheduler", "preempt_policy", args.preempt_policy)
    if args.log_level:
        overrides["log_level"] = args.log_level
    return overrides


def _emit(text: str, path: Optional[Path]) -> None:
    if path is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")


def _report(args: argparse.Namespace, data: Dict[str, Any], summary: str) -> None:
    if args.out is not None:
        write_json(args.out, data)
    else:
        _emit(json.dumps(data, indent=2, sort_keys=True), None)
    _emit(summary, args.summary)


def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise InvalidArgumentError(f"{what} not found: {path}", details={"path": str(path)})
    return path


def _model_params(config: ServeConfig):
    params = init_params(config.lm_config())
    return quantize_weights(params) if config.model.quantize else params


def _condition(config: ServeConfig, args: argparse.Namespace):
    spec = config.codec_spec()
    if args.prompt is not None:
        audio = read_wav(_require_file(args.prompt, "prompt file"))
        if audio.sample_rate != spec.sample_rate:
            raise InvalidArgumentError(
                f"{args.prompt}: sample rate {audio.sample_rate} Hz, expected {spec.sample_rate} Hz"
            )
    else:
        audio = preset_audio(spec, args.preset)
    return prompt_embed(spec, audio, config.model.condition_len, seed=config.model.seed)


def _resolve_adapters(config: ServeConfig, paths: Sequence[Path]):
    registry = AdapterRegistry(config.lm_config())
    names = []
    for path in paths:
        adapter = load_adapter(_require_file(path, "adapter file"), registry.config)
        if adapter.name in registry:
            raise InvalidArgumentError(f"adapter name {adapter.name!r} given twice")
        registry.load(adapter)
        names.append(adapter.name)
    return registry.resolve(names)


# -- commands ------------------------------------------------------------------


def cmd_serve(config: ServeConfig, args: argparse.Namespace) -> int:
    manager = ServerManager(config)
    try:
        asyncio.run(manager.run())
    except OSError as e:
        logger.error(f"Cannot listen on {config.server.host}:{config.server.port}: {e}")
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        logger.info("Server stopped by user")
    return EXIT_OK


def cmd_synth(config: ServeConfig, args: argparse.Namespace) -> int:
    layout = config.vocab_layout()
    spec = config.codec_spec()
    utterances = read_phones_file(_require_file(args.phones, "phones file"), layout)
    index = ParameterValidator.validate_int_range(args.line, 1, len(utterances), "--line")
    phones = utterances[index - 1]
    if len(phones) > config.server.max_phones:
        raise InvalidArgumentError(
            f"utterance has {len(phones)} phonemes, server.max_phones is {config.server.max_phones}"
        )

    decode_params = ParameterValidator.validate_decode_params(
        mode=args.mode, temperature=args.temperature, top_k=args.top_k, rng_seed=args.seed,
        max_new_tokens=(args.max_new_tokens if args.max_new_tokens is not None
                        else config.scheduler.default_max_new_tokens),
        codec_only=not args.allow_stray, max_limit=config.scheduler.max_new_tokens_limit,
        vocab_size=layout.total_size,
    )
    adapters = _resolve_adapters(config, args.adapter)
    condition = _condition(config, args)
    params = _model_params(config)

    prefix = compose_inference_prefix(config.model.condition_len, phones)
    result = decode(params, adapters, prefix, condition, decode_params)
    codec_tokens = [layout.codec_index(t) for t in result.codec_ids]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_wav(args.out, tokens_to_pcm(spec, codec_tokens), spec.sample_rate)

    if codec_tokens:
        recovered = pcm_to_tokens(spec, read_wav(args.out).samples).tolist()
        check = per(codec_tokens, recovered)
        verdict = "ok" if check.edits == 0 else "MISMATCH"
        roundtrip = f"roundtrip_per={check.rate:.4f} {verdict}"
    else:
        check = None
        roundtrip = "roundtrip=empty"
    print(f"tokens={len(codec_tokens)} terminated={str(result.terminated).lower()} "
          f"stray={len(result.stray_ids)} {roundtrip} out={args.out}")
    if check is not None and check.edits:
        raise CommandError(f"{args.out}: decoded audio does not invert to the generated tokens")
    return EXIT_OK


def cmd_bench(config: ServeConfig, args: argparse.Namespace) -> int:
    plan = BenchPlan(
        concurrency=args.concurrency,
        requests=args.requests,
        phones_min=args.phones_min,
        phones_max=args.phones_max,
        max_new_tokens=args.max_new_tokens,
        latency_budget_ms=args.latency_budget,
        seed=args.seed,
    )
    result = asyncio.run(run_bench(plan, config, host=args.host, port=args.port))
    if args.json_out is not None:
        write_json(args.json_out, result.to_dict())
    print(result.summary())
    return EXIT_OK if result.passed else EXIT_RUNTIME


def eval_per(config: ServeConfig, args: argparse.Namespace) -> int:
    records = read_jsonl(args.input, PerRecord)
    if not records:
        raise InvalidArgumentError(f"{args.input}: no records")
    reports = {r.utterance_id: per(r.reference, r.hypothesis) for r in records}
    corpus = corpus_per(reports.values())
    data = {"corpus": corpus.to_dict(),
            "utterances": {uid: rep.to_dict() for uid, rep in sorted(reports.items())}}
    _report(args, data, summary_table([SummaryRow(args.input.stem, per=corpus.rate)]))
    return EXIT_OK


def eval_bcr(config: ServeConfig, args: argparse.Namespace) -> int:
    records = read_jsonl(args.input, UtteranceRecord)
    report = build_report(records, BadCaseConfig.from_settings(config.eval))
    if report.utterances != BCR_UTTERANCES:
        logger.warning(
            f"{report.utterances} utterances, bcr needs exactly {BCR_UTTERANCES}; reporting bad_rate"
        )
    rate = bcr(report) if report.utterances == BCR_UTTERANCES else bad_rate(report)
    _report(args, report.to_dict(), summary_table([SummaryRow(args.input.stem, bad_rate=rate)]))
    return EXIT_OK


def eval_pairs(config: ServeConfig, args: argparse.Namespace) -> int:
    samples = read_jsonl(args.input, RatedSample)
    source = RatingSource(args.source)
    if args.ranks is not None:
        samples = apply_human_ranks(samples, read_human_ranks(args.ranks))
    elif source == RatingSource.SUBJECTIVE and any(s.human_rank is None for s in samples):
        raise InvalidArgumentError("subjective pairs need --ranks or human_rank in every sample")
    pairs = build_preference_pairs(samples, source)
    write_jsonl(args.pairs_out, pairs)
    sentences = len({s.sentence_id for s in samples})
    data = {"source": source.value, "sentences": sentences, "pairs": len(pairs),
            "tied": sentences - len(pairs), "output": str(args.pairs_out)}
    _report(args, data, f"{len(pairs)} {source.value} pairs from {sentences} sentences")
    return EXIT_OK


def eval_overlap(config: ServeConfig, args: argparse.Namespace) -> int:
    pairs_a = read_jsonl(args.pairs_a, PreferencePair)
    pairs_b = read_jsonl(args.pairs_b, PreferencePair)
    universe = None
    if args.universe is not None:
        universe = {r["sentence_id"] for r in _sentence_ids(args.universe)}
    report = overlap_report(pairs_a, pairs_b, universe)
    _report(args, report.to_dict(),
            f"overlap {report.fraction:.2f} ({report.agreeing}/{report.sentences} sentences agree)")
    return EXIT_OK


def _sentence_ids(path: Path) -> List[Dict[str, Any]]:
    rows = []
    for line_no, line in enumerate(_require_file(path, "universe file").read_text("utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            rows.append({"sentence_id": str(row["sentence_id"])})
        except (json.JSONDecodeError, KeyError, TypeError):
            raise SchemaError(str(path), line_no, "expected an object with sentence_id") from None
    return rows


def eval_sim(config: ServeConfig, args: argparse.Namespace) -> int:
    records = read_jsonl(args.input, SimilarityRecord)
    base_dir = args.base_dir if args.base_dir is not None else args.input.parent
    report = similarity_report(load_similarity_pairs(records, base_dir), config.codec_spec(),
                               config.model.condition_len, config.model.seed)
    _report(args, report.to_dict(), summary_table([SummaryRow(args.input.stem, sim=report.mean)]))
    return EXIT_OK


def eval_sample(config: ServeConfig, args: argparse.Namespace) -> int:
    sentences = read_jsonl(args.input, SentenceRecord)
    plan = SamplingPlan(
        samples=args.samples if args.samples is not None else config.eval.samples_per_sentence,
        base_seed=args.base_seed,
        temperature=args.temperature,
        top_k=args.top_k,
        max_new_tokens=(args.max_new_tokens if args.max_new_tokens is not None
                        else config.scheduler.default_max_new_tokens),
    )
    rated = sample_and_rate(_model_params(config), sentences, _condition(config, args),
                            config.codec_spec(), plan, _resolve_adapters(config, args.adapter))
    write_jsonl(args.samples_out, rated)
    kept = len({s.sentence_id for s in rated})
    data = {"sentences": len(sentences), "rated_sentences": kept, "samples": len(rated),
            "output": str(args.samples_out)}
    _report(args, data, f"{len(rated)} samples over {kept}/{len(sentences)} sentences")
    return EXIT_OK


EVAL_COMMANDS = {
    "per": eval_per,
    "bcr": eval_bcr,
    "pairs": eval_pairs,
    "overlap": eval_overlap,
    "sim": eval_sim,
    "sample": eval_sample,
}


def cmd_eval(config: ServeConfig, args: argparse.Namespace) -> int:
    return EVAL_COMMANDS[args.eval_command](config, args)


def cmd_adapter(config: ServeConfig, args: argparse.Namespace) -> int:
    model_config = config.lm_config()
    if args.adapter_command == "inspect":
        adapter = load_adapter(_require_file(args.path, "adapter file"))
        problems = []
        try:
            adapter.validate_against(model_config)
        except SpeechLMError as e:
            problems.append(e.message)
        print(json.dumps({
            "name": adapter.name,
            "kind": adapter.kind.value,
            "rank": adapter.rank,
            "alpha": adapter.alpha,
            "digest": adapter.digest,
            "tensors": adapter.manifest(),
            "fits_model": not problems,
            "problems": problems,
        }, indent=2))
        return EXIT_OK

    if args.npz is not None:
        adapter = adapter_from_npz(_require_file(args.npz, "factor file"), args.name,
                                   args.kind, args.alpha)
    else:
        adapter = random_adapter(model_config, args.name, args.kind, rank=args.rank,
                                 alpha=args.alpha, seed=args.seed)
    adapter.validate_against(model_config)
    save_adapter(adapter, args.out)
    print(f"packed {adapter.name} ({adapter.kind.value}, rank {adapter.rank}) -> {args.out}")
    return EXIT_OK


COMMANDS = {
    "serve": cmd_serve,
    "synth": cmd_synth,
    "bench": cmd_bench,
    "eval": cmd_eval,
    "adapter": cmd_adapter,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point."""
    parser = create_parser()
    args = parser.parse_args(argv)
    handler = ErrorHandler(logger)

    try:
        config = load_config(args.config, _flag_overrides(args), args.env_file, args.environment)
    except (PydanticValidationError, SpeechLMError) as e:
        logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
        details = handler.handle(e, "config")
        print(f"error: invalid configuration: {details.message}", file=sys.stderr)
        return EXIT_USAGE

    configure_logging(config, debug=args.debug)
    command = args.command if args.command != "eval" else f"eval {args.eval_command}"
    try:
        return COMMANDS[args.command](config, args)
    except (SpeechLMError, PydanticValidationError, OSError) as e:
        details = handler.handle(e, command)
        print(f"error: {details.message}", file=sys.stderr)
        return handler.exit_code(e)
    except KeyboardInterrupt:
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
