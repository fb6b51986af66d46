"""
Deterministic stand-in for the neural codec and the acoustic prompt encoder.

Codec token ``t`` renders as one frame of ``frame_len`` 16-bit samples holding
a cosine at analysis bin ``t + 1`` with zero initial phase. Distinct tokens
land on distinct DFT bins, so a frame decodes back to its token by taking the
strongest bin; the mapping is exactly invertible and survives moderate noise.

Audio is always mono signed 16-bit PCM; on disk it is a RIFF/WAV file, on the
wire raw little-endian samples.
"""

import io
import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, Sequence, Tuple, Union

import numpy as np
import soundfile as sf

from .codeclm.params import SplitMix64
from .errors import InvalidArgumentError

logger = logging.getLogger(__name__)

PCM_FULL_SCALE = 32767
WAV_SUBTYPE = "PCM_16"

# Token patterns the preset prompts are rendered from.
PRESET_TOKENS: Dict[str, Tuple[int, ...]] = {
    "neutral": (64, 96, 128, 160),
    "bright": (512, 600, 700, 800),
    "deep": (2, 4, 8, 16),
}


@dataclass(frozen=True)
class CodecSpec:
    sample_rate: int = 24000
    frame_len: int = 2048
    amplitude: float = 0.5
    codec_count: int = 1024
    embed_dim: int = 64
    log_floor: float = 1e-6

    def __post_init__(self):
        if self.frame_len < 2 or self.sample_rate < 1:
            raise InvalidArgumentError("frame_len must be >= 2 and sample_rate >= 1")
        if not 1 <= self.codec_count <= self.frame_len // 2:
            raise InvalidArgumentError(
                f"codec_count ({self.codec_count}) must be in [1, frame_len/2 = {self.frame_len // 2}]"
            )
        if not 0 < self.amplitude <= 1:
            raise InvalidArgumentError(f"amplitude must be in (0, 1], got {self.amplitude}")
        if self.log_floor <= 0:
            raise InvalidArgumentError("log_floor must be positive")

    @property
    def frame_seconds(self) -> float:
        return self.frame_len / self.sample_rate

    @property
    def spectrum_bins(self) -> int:
        return self.frame_len // 2 + 1


@dataclass(frozen=True)
class PromptAudio:
    samples: np.ndarray  # int16, mono
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1 or samples.size == 0:
            raise InvalidArgumentError("prompt audio must be non-empty mono PCM")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def token_frequency(spec: CodecSpec, t: int) -> float:
    """Frequency in Hz of the tone rendering codec token ``t``."""
    _check_token(spec, t)
    return (t + 1) * spec.sample_rate / spec.frame_len


def _check_token(spec: CodecSpec, t: int) -> None:
    if not 0 <= t < spec.codec_count:
        raise InvalidArgumentError(
            f"codec token {t} outside [0, {spec.codec_count})", details={"token": t}
        )


@lru_cache(maxsize=8)
def _codebook(spec: CodecSpec) -> np.ndarray:
    n = np.arange(spec.frame_len, dtype=np.float64)
    bins = np.arange(1, spec.codec_count + 1, dtype=np.float64)[:, None]
    waves = spec.amplitude * PCM_FULL_SCALE * np.cos(2.0 * np.pi * bins * n / spec.frame_len)
    book = np.rint(waves).astype(np.int16)
    book.setflags(write=False)
    return book


def token_to_frame(spec: CodecSpec, t: int) -> np.ndarray:
    _check_token(spec, t)
    return _codebook(spec)[t].copy()


def _frames(spec: CodecSpec, pcm: np.ndarray) -> np.ndarray:
    pcm = np.asarray(pcm)
    if pcm.ndim != 1 or pcm.size % spec.frame_len:
        raise InvalidArgumentError(
            f"PCM length {pcm.size} is not a whole number of {spec.frame_len}-sample frames"
        )
    return pcm.reshape(-1, spec.frame_len).astype(np.float64)


def _strongest_bins(spec: CodecSpec, frames: np.ndarray) -> np.ndarray:
    mags = np.abs(np.fft.rfft(frames, axis=1))[:, 1 : spec.codec_count + 1]
    tokens = np.argmax(mags, axis=1)
    # Silent frames decode to token 0.
    tokens[mags.max(axis=1) == 0] = 0
    return tokens


def frame_to_token(spec: CodecSpec, frame: np.ndarray) -> int:
    frame = np.asarray(frame)
    if frame.shape != (spec.frame_len,):
        raise InvalidArgumentError(f"frame must have {spec.frame_len} samples, got {frame.shape}")
    return int(_strongest_bins(spec, _frames(spec, frame))[0])


def tokens_to_pcm(spec: CodecSpec, tokens: Sequence[int]) -> np.ndarray:
    """Concatenated frames for codec token indices."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        return np.zeros(0, dtype=np.int16)
    bad = tokens[(tokens < 0) | (tokens >= spec.codec_count)]
    if bad.size:
        _check_token(spec, int(bad[0]))
    return _codebook(spec)[tokens].reshape(-1)


def pcm_to_tokens(spec: CodecSpec, pcm: np.ndarray) -> np.ndarray:
    if np.asarray(pcm).size == 0:
        return np.zeros(0, dtype=np.int64)
    return _strongest_bins(spec, _frames(spec, pcm)).astype(np.int64)


def pcm_from_bytes(data: bytes) -> np.ndarray:
    if len(data) % 2:
        raise InvalidArgumentError("16-bit PCM payload has an odd byte count")
    return np.frombuffer(data, dtype="<i2").astype(np.int16)


def _samples(audio: Union[PromptAudio, np.ndarray]) -> np.ndarray:
    return np.asarray(audio.samples if isinstance(audio, PromptAudio) else audio)


def pooled_spectrum(spec: CodecSpec, audio: Union[PromptAudio, np.ndarray]) -> np.ndarray:
    """Mean over whole frames of the per-frame log-magnitude spectrum.

    Samples follow the 16-bit convention and are scaled by 1/32768; a trailing
    partial frame is ignored.
    """
    samples = _samples(audio)
    n_frames = samples.size // spec.frame_len
    if samples.ndim != 1 or n_frames < 1:
        raise InvalidArgumentError(
            f"prompt audio needs at least one {spec.frame_len}-sample frame, got {samples.size} samples"
        )
    frames = samples[: n_frames * spec.frame_len].astype(np.float64) / 32768.0
    frames = frames.reshape(n_frames, spec.frame_len)
    log_mag = np.log(np.maximum(np.abs(np.fft.rfft(frames, axis=1)), spec.log_floor))
    return log_mag.mean(axis=0)


@lru_cache(maxsize=4)
def _embed_projection(bins: int, condition_len: int, embed_dim: int, seed: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(bins)
    matrix = SplitMix64(seed).uniform((condition_len * embed_dim, bins), -bound, bound)
    matrix.setflags(write=False)
    return matrix


def prompt_embed(spec: CodecSpec, audio: Union[PromptAudio, np.ndarray], condition_len: int,
                 seed: int = 0) -> np.ndarray:
    """``(condition_len, embed_dim)`` condition embeddings from prompt audio."""
    if condition_len < 0:
        raise InvalidArgumentError(f"condition_len must be >= 0, got {condition_len}")
    pooled = pooled_spectrum(spec, audio)
    if condition_len == 0:
        return np.zeros((0, spec.embed_dim), dtype=np.float32)
    matrix = _embed_projection(pooled.size, condition_len, spec.embed_dim, seed)
    embedding = matrix.astype(np.float64) @ pooled
    return embedding.astype(np.float32).reshape(condition_len, spec.embed_dim)


def sim(embedding_a: np.ndarray, embedding_b: np.ndarray) -> float:
    """Cosine similarity of two embeddings (flattened)."""
    a = np.asarray(embedding_a, dtype=np.float64).reshape(-1)
    b = np.asarray(embedding_b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"embedding dimensions differ: {a.size} vs {b.size}")
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a == 0 or norm_b == 0:
        raise InvalidArgumentError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (norm_a * norm_b), -1.0, 1.0))


def preset_audio(spec: CodecSpec, name: str) -> PromptAudio:
    """Built-in prompt rendered from a fixed token pattern."""
    try:
        pattern = PRESET_TOKENS[name]
    except KeyError:
        raise InvalidArgumentError(
            f"unknown prompt preset {name!r}; available: {sorted(PRESET_TOKENS)}"
        ) from None
    tokens = [t % spec.codec_count for t in pattern]
    return PromptAudio(tokens_to_pcm(spec, tokens), spec.sample_rate)


def _check_wav(info, source: str) -> None:
    if info.channels != 1:
        raise InvalidArgumentError(f"{source}: expected mono audio, got {info.channels} channels")
    if info.subtype != WAV_SUBTYPE:
        raise InvalidArgumentError(f"{source}: expected 16-bit PCM, got {info.subtype}")


def read_wav(path: Union[str, Path]) -> PromptAudio:
    path = Path(path)
    try:
        _check_wav(sf.info(str(path)), str(path))
        samples, sample_rate = sf.read(str(path), dtype="int16")
    except RuntimeError as e:
        raise InvalidArgumentError(f"cannot read WAV {path}: {e}") from e
    logger.debug(f"Read {len(samples)} samples at {sample_rate} Hz from {path}")
    return PromptAudio(samples, sample_rate)


def write_wav(path: Union[str, Path], pcm: np.ndarray, sample_rate: int) -> Path:
    path = Path(path)
    sf.write(str(path), np.asarray(pcm, dtype=np.int16), sample_rate,
             subtype=WAV_SUBTYPE, format="WAV")
    return path


def wav_to_bytes(pcm: np.ndarray, sample_rate: int) -> bytes:
    buffer = io.BytesIO()
    sf.write(buffer, np.asarray(pcm, dtype=np.int16), sample_rate,
             subtype=WAV_SUBTYPE, format="WAV")
    return buffer.getvalue()


def wav_from_bytes(data: bytes) -> PromptAudio:
    try:
        _check_wav(sf.info(io.BytesIO(data)), "WAV payload")
        samples, sample_rate = sf.read(io.BytesIO(data), dtype="int16")
    except RuntimeError as e:
        raise InvalidArgumentError(f"cannot decode WAV payload: {e}") from e
    return PromptAudio(samples, sample_rate)
